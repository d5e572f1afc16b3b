use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bagstore::format::{read_bag, read_bag_header, FeatureBag};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<FeatureBag>> {
        self.split(split)
            .map(|e| {
                let bag = read_bag(&e.path)?;
                if bag.label != e.label {
                    return Err(Error::Manifest(format!(
                        "{} carries label {} but the manifest says {}",
                        e.path.display(),
                        bag.label,
                        e.label
                    )));
                }
                if bag.feature_dim() != self.feature_dim {
                    return Err(Error::Manifest(format!(
                        "{} has feature dim {}, expected {}",
                        e.path.display(),
                        bag.feature_dim(),
                        self.feature_dim
                    )));
                }
                Ok(bag)
            })
            .collect()
    }

    /// Writes `path,label,split`; paths are stored relative to the manifest's
    /// directory when possible.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["path", "label", "split"])
            .map_err(|e| csv_err(path, e))?;
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            w.write_record([
                rel.to_string_lossy().as_ref(),
                &e.label.to_string(),
                e.split.as_str(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest CSV. The class count is one past the largest label
    /// (or `min_classes`, if larger); the feature dimension comes from the
    /// first bag's header and must agree across all bags.
    pub fn read_csv(path: impl AsRef<Path>, min_classes: usize) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::Manifest("header must be path,label,split".into()));
        }
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let label = rec[1]
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Manifest(format!("bad label {:?}", &rec[1])))?;
            entries.push(ManifestEntry {
                path: base.join(rec[0].trim()),
                label,
                split: rec[2].trim().parse()?,
            });
        }
        let first = entries
            .first()
            .ok_or_else(|| Error::Manifest("no entries".into()))?;
        let (_, _, feature_dim) = read_bag_header(&first.path)?;
        for e in &entries {
            let (_, _, d) = read_bag_header(&e.path)?;
            if d != feature_dim {
                return Err(Error::Manifest(format!(
                    "{} has feature dim {d}, expected {feature_dim}",
                    e.path.display()
                )));
            }
        }
        let num_classes = entries
            .iter()
            .map(|e| e.label + 1)
            .max()
            .unwrap_or(0)
            .max(min_classes);
        Ok(DatasetManifest {
            entries,
            num_classes,
            feature_dim,
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Manifest(format!("{}: {e}", path.display()))
}

/// Train/val/test fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.60,
            val: 0.15,
            test: 0.25,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!("split ratios must be non-negative: {r:?}")));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("split ratios must sum to 1: {r:?}")));
        }
        if r.contains(&0.0) && !r.contains(&1.0) {
            return Err(Error::Invalid(format!(
                "zero split ratios are only allowed when another ratio is 1: {r:?}"
            )));
        }
        Ok(())
    }
}

/// Splits `round(ratio · Σ sizes)` over classes by rounding the cumulative
/// shares, so every class moves by less than one from `ratio × size`.
fn cumulative_round(ratio: f64, sizes: &[usize]) -> Vec<usize> {
    let mut seen = 0usize;
    let mut prev = 0usize;
    sizes
        .iter()
        .map(|&s| {
            seen += s;
            let cur = (ratio * seen as f64).round() as usize;
            let out = cur - prev;
            prev = cur;
            out
        })
        .collect()
}

/// Per-class split sizes `[train, val, test]`.
///
/// Val and test totals are the rounded ratio shares of the whole set; train
/// takes the remainder. Each class's count in each split stays within one
/// bag of `ratio × class size`.
fn stratified_counts(sizes: &[usize], ratios: SplitRatios) -> Vec<[usize; 3]> {
    let ideal: Vec<[f64; 3]> = sizes
        .iter()
        .map(|&s| {
            let s = s as f64;
            [ratios.train * s, ratios.val * s, ratios.test * s]
        })
        .collect();
    let val = cumulative_round(ratios.val, sizes);
    let test = cumulative_round(ratios.test, sizes);
    let mut counts: Vec<[usize; 3]> = sizes
        .iter()
        .enumerate()
        .map(|(c, &s)| [s - val[c] - test[c], val[c], test[c]])
        .collect();

    // Val/test are already within one bag; the train remainder can drift up
    // to two. Move single bags of val or test between classes to pull it back.
    let err = |counts: &[[usize; 3]], c: usize, k: usize| counts[c][k] as f64 - ideal[c][k];
    for _ in 0..4 * sizes.len() + 4 {
        let Some(c) = (0..sizes.len()).find(|&c| err(&counts, c, 0).abs() > 1.0 + 1e-9) else {
            break;
        };
        let too_few_train = err(&counts, c, 0) < 0.0;
        let mut moved = false;
        'search: for k in 1..3 {
            for other in 0..sizes.len() {
                if other == c {
                    continue;
                }
                let (from, to) = if too_few_train { (c, other) } else { (other, c) };
                if counts[from][k] == 0 || counts[to][0] == 0 {
                    continue;
                }
                let ok = err(&counts, from, k) - 1.0 >= -1.0 - 1e-9
                    && err(&counts, to, k) + 1.0 <= 1.0 + 1e-9
                    && err(&counts, from, 0) + 1.0 <= 1.0 + 1e-9
                    && err(&counts, to, 0) - 1.0 >= -1.0 - 1e-9;
                if ok {
                    counts[from][k] -= 1;
                    counts[from][0] += 1;
                    counts[to][k] += 1;
                    counts[to][0] -= 1;
                    moved = true;
                    break 'search;
                }
            }
        }
        if !moved {
            break;
        }
    }
    counts
}

/// Stratified random partition into train/val/test; see
/// [`stratified_counts`] for how split sizes are chosen.
pub fn split_dataset(
    entries: &[(PathBuf, usize)],
    ratios: SplitRatios,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    ratios.validate()?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, label)) in entries.iter().enumerate() {
        by_class.entry(*label).or_default().push(i);
    }
    for (&c, members) in &by_class {
        if members.len() < 3 {
            return Err(Error::ClassTooSmall(c, members.len()));
        }
    }
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let counts = stratified_counts(&sizes, ratios);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split_of = vec![Split::Train; entries.len()];
    for (members, [_, nv, nt]) in by_class.values().zip(counts) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..nv] {
            split_of[i] = Split::Val;
        }
        for &i in &shuffled[nv..nv + nt] {
            split_of[i] = Split::Test;
        }
    }
    Ok(entries
        .iter()
        .zip(split_of)
        .map(|((path, label), split)| ManifestEntry {
            path: path.clone(),
            label: *label,
            split,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entries(sizes: &[usize]) -> Vec<(PathBuf, usize)> {
        let mut out = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            for i in 0..s {
                out.push((PathBuf::from(format!("c{c}_{i}.milb")), c));
            }
        }
        out
    }

    fn counts(m: &[ManifestEntry]) -> [usize; 3] {
        let mut out = [0; 3];
        for e in m {
            out[e.split as usize] += 1;
        }
        out
    }

    #[test]
    fn sixty_fifteen_twenty_five() {
        let r = SplitRatios::default();
        assert_eq!(counts(&split_dataset(&entries(&[100]), r, 1).unwrap()), [60, 15, 25]);
        assert_eq!(counts(&split_dataset(&entries(&[50, 50]), r, 1).unwrap()), [60, 15, 25]);
    }

    #[test]
    fn degenerate_all_train() {
        let r = SplitRatios {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        assert_eq!(counts(&split_dataset(&entries(&[7, 9]), r, 3).unwrap()), [16, 0, 0]);
    }

    #[test]
    fn invalid_ratios_and_small_classes() {
        let r = SplitRatios {
            train: 0.5,
            val: 0.5,
            test: 0.0,
        };
        assert!(split_dataset(&entries(&[10]), r, 0).is_err());
        let r = SplitRatios {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(split_dataset(&entries(&[10]), r, 0).is_err());
        let err = split_dataset(&entries(&[10, 2]), SplitRatios::default(), 0).unwrap_err();
        assert!(err.to_string().starts_with("class too small to stratify"));
    }

    #[test]
    fn same_seed_same_partition() {
        let e = entries(&[30, 40]);
        let a = split_dataset(&e, SplitRatios::default(), 9).unwrap();
        let b = split_dataset(&e, SplitRatios::default(), 9).unwrap();
        let c = split_dataset(&e, SplitRatios::default(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn partition_and_proportions(sizes in proptest::collection::vec(3usize..60, 1..5), seed in 0u64..100) {
            let e = entries(&sizes);
            let r = SplitRatios::default();
            let m = split_dataset(&e, r, seed).unwrap();
            let total = e.len() as f64;
            let c = counts(&m);
            prop_assert_eq!(c[1], (0.15 * total).round() as usize);
            prop_assert_eq!(c[2], (0.25 * total).round() as usize);
            prop_assert_eq!(m.len(), e.len());
            for (entry, (p, l)) in m.iter().zip(&e) {
                prop_assert_eq!(&entry.path, p);
                prop_assert_eq!(entry.label, *l);
            }
            for (c, &s) in sizes.iter().enumerate() {
                for (split, ratio) in [(Split::Train, r.train), (Split::Val, r.val), (Split::Test, r.test)] {
                    let got = m.iter().filter(|x| x.label == c && x.split == split).count() as f64;
                    prop_assert!((got - ratio * s as f64).abs() <= 1.0 + 1e-9, "class {} {:?}: {} vs {}", c, split, got, ratio * s as f64);
                }
            }
        }
    }
}
