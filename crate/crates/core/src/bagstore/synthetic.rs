//! Synthetic MIL benchmark with a controllable witness rate.
//!
//! Class `c` has mean `(separation/√2)·e_c`, so every pair of class means is
//! exactly `separation` apart; background instances come from a zero-mean
//! Gaussian shared by all classes. Both use the same isotropic noise scale.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bagstore::format::{write_bag, FeatureBag};
use crate::bagstore::manifest::{split_dataset, DatasetManifest, SplitRatios};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Number of bags for each class; its length is the class count.
    pub bags_per_class: Vec<usize>,
    pub n_min: usize,
    pub n_max: usize,
    pub feature_dim: usize,
    pub witness_rate: f64,
    pub separation: f64,
    pub noise: f64,
    pub split: SplitRatios,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            bags_per_class: vec![50, 50],
            n_min: 20,
            n_max: 60,
            feature_dim: 32,
            witness_rate: 0.1,
            separation: 2.0,
            noise: 0.5,
            split: SplitRatios::default(),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.bags_per_class.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.bags_per_class.is_empty() {
            return bad("at least one class is required".into());
        }
        if self.num_classes() > 256 {
            return bad("at most 256 classes fit the bag format".into());
        }
        if self.n_min < 1 || self.n_min > self.n_max {
            return bad(format!("bag-size range [{}, {}] is invalid", self.n_min, self.n_max));
        }
        if self.feature_dim < self.num_classes() {
            return bad(format!(
                "feature_dim {} must be at least the class count {}",
                self.feature_dim,
                self.num_classes()
            ));
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return bad(format!("witness_rate {} outside (0, 1]", self.witness_rate));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return bad(format!("separation {} must be finite and >= 0", self.separation));
        }
        if !self.noise.is_finite() || self.noise <= 0.0 {
            return bad(format!("noise {} must be finite and > 0", self.noise));
        }
        self.split.validate()
    }

    /// `round(rate · n)`, at least one.
    pub fn witness_count(&self, n: usize) -> usize {
        ((self.witness_rate * n as f64).round() as usize).clamp(1, n)
    }

    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut mu = vec![0.0; self.feature_dim];
        mu[class] = self.separation / std::f64::consts::SQRT_2;
        mu
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedBag {
    pub bag: FeatureBag,
    /// Sorted indices of instances drawn from the class distribution.
    pub witnesses: Vec<usize>,
}

/// Draws every bag in memory. Order: class by class, bag by bag.
pub fn generate_bags(spec: &SyntheticSpec) -> Result<Vec<GeneratedBag>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Invalid(e.to_string()))?;
    let d = spec.feature_dim;
    let mut out = Vec::new();
    for (class, &count) in spec.bags_per_class.iter().enumerate() {
        let mean = spec.class_mean(class);
        for b in 0..count {
            let n = rng.gen_range(spec.n_min..=spec.n_max);
            let k = spec.witness_count(n);
            let mut witnesses = sample(&mut rng, n, k).into_vec();
            witnesses.sort_unstable();
            let mut is_witness = vec![false; n];
            for &w in &witnesses {
                is_witness[w] = true;
            }
            let mut features = Vec::with_capacity(n * d);
            for &w in &is_witness {
                for &m in &mean {
                    let centre = if w { m } else { 0.0 };
                    features.push((centre + noise.sample(&mut rng)) as f32);
                }
            }
            let bag = FeatureBag::new(format!("c{class}_b{b:04}"), class, n, d, features)?;
            out.push(GeneratedBag { bag, witnesses });
        }
    }
    Ok(out)
}

pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub bags: Vec<GeneratedBag>,
    pub manifest_path: PathBuf,
}

/// Writes bags under `out_dir/bags/`, a stratified `manifest.csv`, and a
/// `witnesses.csv` listing every witness instance.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let out_dir = out_dir.as_ref();
    let bags = generate_bags(spec)?;
    let bag_dir = out_dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let mut listed = Vec::with_capacity(bags.len());
    for g in &bags {
        let path = bag_dir.join(format!("{}.milb", g.bag.id));
        write_bag(&g.bag, &path)?;
        listed.push((path, g.bag.label));
    }
    let entries = split_dataset(&listed, spec.split, spec.seed)?;
    let manifest = DatasetManifest {
        entries,
        num_classes: spec.num_classes(),
        feature_dim: spec.feature_dim,
    };
    let manifest_path = out_dir.join("manifest.csv");
    manifest.write_csv(&manifest_path)?;

    let wpath = out_dir.join("witnesses.csv");
    let mut w = csv::Writer::from_path(&wpath)
        .map_err(|e| Error::Manifest(format!("{}: {e}", wpath.display())))?;
    let werr = |e: csv::Error| Error::Manifest(e.to_string());
    w.write_record(["id", "instance_index"]).map_err(werr)?;
    for g in &bags {
        for i in &g.witnesses {
            w.write_record([g.bag.id.as_str(), &i.to_string()]).map_err(werr)?;
        }
    }
    w.flush().map_err(|e| Error::io(&wpath, e))?;

    Ok(SyntheticDataset {
        manifest,
        bags,
        manifest_path,
    })
}
