//! Layered `key = value` configuration.
//!
//! A file is read first, then `--set` style overrides are applied in order.
//! Every key has a default; [`Config::dump`] prints them all.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bagstore::{SplitRatios, SyntheticSpec};
use crate::error::{Error, Result};
use crate::iqgm::IqgmConfig;
use crate::mdm::MdmConfig;
use crate::trainer::{LossConfig, TrainConfig};

pub const KEYS: &[&str] = &[
    "data.manifest",
    "iqgm.r1",
    "iqgm.r2",
    "iqgm.beta",
    "mdm.model_dim",
    "mdm.heads",
    "mdm.ffn_expansion",
    "mdm.alpha",
    "mdm.alpha_mode",
    "mdm.alpha_hi",
    "mdm.alpha_lo",
    "loss.tau",
    "loss.momentum",
    "loss.alpha_cl",
    "train.method",
    "train.epochs",
    "train.lr",
    "train.weight_decay",
    "train.decay",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.seed",
    "train.max_drop",
    "train.checkpoint",
    "synth.bags_per_class",
    "synth.n_min",
    "synth.n_max",
    "synth.feature_dim",
    "synth.witness_rate",
    "synth.separation",
    "synth.noise",
    "synth.split",
    "synth.seed",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub manifest: Option<PathBuf>,
    /// `input_dim` and `num_classes` are filled in from the data.
    pub mdm: MdmConfig,
    pub iqgm: IqgmConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::BadConfigValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "iqgm.r1" => self.iqgm.r1 = parse(key, v)?,
            "iqgm.r2" => self.iqgm.r2 = parse(key, v)?,
            "iqgm.beta" => self.iqgm.beta = parse(key, v)?,
            "mdm.model_dim" => self.mdm.model_dim = parse(key, v)?,
            "mdm.heads" => self.mdm.num_heads = parse(key, v)?,
            "mdm.ffn_expansion" => self.mdm.ffn_expansion = parse(key, v)?,
            "mdm.alpha" => self.mdm.alpha = parse(key, v)?,
            "mdm.alpha_mode" => self.mdm.alpha_mode = parse(key, v)?,
            "mdm.alpha_hi" => self.mdm.alpha_hi = parse(key, v)?,
            "mdm.alpha_lo" => self.mdm.alpha_lo = parse(key, v)?,
            "loss.tau" => self.loss.tau = parse(key, v)?,
            "loss.momentum" => self.loss.momentum = parse(key, v)?,
            "loss.alpha_cl" => self.loss.alpha_cl = parse(key, v)?,
            "train.method" => self.train.method = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.lr" => self.train.base_lr = parse(key, v)?,
            "train.weight_decay" => self.train.adam.weight_decay = parse(key, v)?,
            "train.decay" => self.train.adam.decay = parse(key, v)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "train.eps" => self.train.adam.eps = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.max_drop" => self.train.max_drop = parse(key, v)?,
            "train.checkpoint" => self.train.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synth.bags_per_class" => self.synth.bags_per_class = parse_list(key, v)?,
            "synth.n_min" => self.synth.n_min = parse(key, v)?,
            "synth.n_max" => self.synth.n_max = parse(key, v)?,
            "synth.feature_dim" => self.synth.feature_dim = parse(key, v)?,
            "synth.witness_rate" => self.synth.witness_rate = parse(key, v)?,
            "synth.separation" => self.synth.separation = parse(key, v)?,
            "synth.noise" => self.synth.noise = parse(key, v)?,
            "synth.split" => {
                let r: Vec<f64> = parse_list(key, v)?;
                if r.len() != 3 {
                    return Err(Error::BadConfigValue {
                        key: key.into(),
                        value: v.into(),
                    });
                }
                self.synth.split = SplitRatios {
                    train: r[0],
                    val: r[1],
                    test: r[2],
                };
            }
            "synth.seed" => self.synth.seed = parse(key, v)?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Applies every assignment in `text`. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                self.apply_override(line)?;
            }
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Config::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Sets both the training and the generator seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Ok(match key {
            "data.manifest" => path(&self.manifest),
            "iqgm.r1" => self.iqgm.r1.to_string(),
            "iqgm.r2" => self.iqgm.r2.to_string(),
            "iqgm.beta" => self.iqgm.beta.to_string(),
            "mdm.model_dim" => self.mdm.model_dim.to_string(),
            "mdm.heads" => self.mdm.num_heads.to_string(),
            "mdm.ffn_expansion" => self.mdm.ffn_expansion.to_string(),
            "mdm.alpha" => self.mdm.alpha.to_string(),
            "mdm.alpha_mode" => self.mdm.alpha_mode.to_string(),
            "mdm.alpha_hi" => self.mdm.alpha_hi.to_string(),
            "mdm.alpha_lo" => self.mdm.alpha_lo.to_string(),
            "loss.tau" => self.loss.tau.to_string(),
            "loss.momentum" => self.loss.momentum.to_string(),
            "loss.alpha_cl" => self.loss.alpha_cl.to_string(),
            "train.method" => self.train.method.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.lr" => self.train.base_lr.to_string(),
            "train.weight_decay" => self.train.adam.weight_decay.to_string(),
            "train.decay" => self.train.adam.decay.to_string(),
            "train.beta1" => self.train.adam.beta1.to_string(),
            "train.beta2" => self.train.adam.beta2.to_string(),
            "train.eps" => self.train.adam.eps.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.max_drop" => self.train.max_drop.to_string(),
            "train.checkpoint" => path(&self.train.checkpoint),
            "synth.bags_per_class" => join(&self.synth.bags_per_class),
            "synth.n_min" => self.synth.n_min.to_string(),
            "synth.n_max" => self.synth.n_max.to_string(),
            "synth.feature_dim" => self.synth.feature_dim.to_string(),
            "synth.witness_rate" => self.synth.witness_rate.to_string(),
            "synth.separation" => self.synth.separation.to_string(),
            "synth.noise" => self.synth.noise.to_string(),
            "synth.split" => join(&[self.synth.split.train, self.synth.split.val, self.synth.split.test]),
            "synth.seed" => self.synth.seed.to_string(),
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        })
    }

    /// Every key with its current value, one `key = value` line each. The
    /// output parses back to the same configuration.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Model configuration for data of the given shape.
    pub fn mdm_for(&self, input_dim: usize, num_classes: usize) -> MdmConfig {
        MdmConfig {
            input_dim,
            num_classes,
            ..self.mdm.clone()
        }
    }
}
