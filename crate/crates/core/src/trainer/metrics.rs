use std::path::Path;

use crate::error::{Error, Result};

/// Mann–Whitney estimate of `P(score⁺ > score⁻)`, ties counting one half.
/// `None` when either side is empty.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(positive.iter().copied()).collect();
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j + 1 < pairs.len() && pairs[j + 1].0 == pairs[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * pairs[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Positive-class AUC for two classes, macro one-vs-rest otherwise. NaN
    /// when no class has both positives and negatives.
    pub auc: f64,
    pub predictions: Vec<Prediction>,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl MetricsReport {
    pub fn from_predictions(predictions: Vec<Prediction>, num_classes: usize) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Invalid("cannot evaluate an empty split".into()));
        }
        let correct = predictions.iter().filter(|p| p.predicted == p.label).count();
        let accuracy = correct as f64 / predictions.len() as f64;
        let class_auc = |c: usize| {
            let s: Vec<f64> = predictions.iter().map(|p| p.probs[c]).collect();
            let y: Vec<bool> = predictions.iter().map(|p| p.label == c).collect();
            auc(&s, &y)
        };
        let auc = if num_classes == 2 {
            class_auc(1).unwrap_or_else(|| {
                log::warn!("split holds a single class; auc is undefined");
                f64::NAN
            })
        } else {
            let mut got = Vec::new();
            for c in 0..num_classes {
                match class_auc(c) {
                    Some(a) => got.push(a),
                    None => log::warn!("class {c} has no positives or no negatives; skipped in macro auc"),
                }
            }
            if got.is_empty() {
                f64::NAN
            } else {
                got.iter().sum::<f64>() / got.len() as f64
            }
        };
        Ok(MetricsReport {
            accuracy,
            auc,
            predictions,
        })
    }

    /// `metric,value` rows.
    pub fn write_metrics_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv_writer(path)?;
        let e = |e: csv::Error| Error::Manifest(e.to_string());
        w.write_record(["metric", "value"]).map_err(e)?;
        w.write_record(["accuracy", &self.accuracy.to_string()]).map_err(e)?;
        w.write_record(["auc", &self.auc.to_string()]).map_err(e)?;
        w.write_record(["bags", &self.predictions.len().to_string()]).map_err(e)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `id,label,predicted,p0,p1,…` rows.
    pub fn write_predictions_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv_writer(path)?;
        let e = |e: csv::Error| Error::Manifest(e.to_string());
        let classes = self.predictions.first().map_or(0, |p| p.probs.len());
        let mut header = vec!["id".to_string(), "label".into(), "predicted".into()];
        header.extend((0..classes).map(|c| format!("p{c}")));
        w.write_record(&header).map_err(e)?;
        for p in &self.predictions {
            let mut row = vec![p.id.clone(), p.label.to_string(), p.predicted.to_string()];
            row.extend(p.probs.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Manifest(format!("{}: {other:?}", path.display())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(scores: &[f64], pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, a) in scores.iter().enumerate() {
            for (j, b) in scores.iter().enumerate() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn pair_example() {
        let a = auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(a, 0.75);
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.2, 0.5, 0.5], &[false, false, true]).unwrap(), 0.75);
        assert_eq!(auc(&[0.2], &[true]), None);
    }

    #[test]
    fn accuracy_and_multiclass() {
        let preds = vec![
            Prediction { id: "a".into(), label: 0, predicted: 0, probs: vec![0.7, 0.2, 0.1] },
            Prediction { id: "b".into(), label: 1, predicted: 1, probs: vec![0.1, 0.8, 0.1] },
            Prediction { id: "c".into(), label: 2, predicted: 2, probs: vec![0.2, 0.2, 0.6] },
        ];
        let r = MetricsReport::from_predictions(preds, 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.auc, 1.0);
    }

    #[test]
    fn missing_class_is_skipped_in_macro() {
        let preds = vec![
            Prediction { id: "a".into(), label: 0, predicted: 0, probs: vec![0.7, 0.2, 0.1] },
            Prediction { id: "b".into(), label: 1, predicted: 0, probs: vec![0.5, 0.4, 0.1] },
        ];
        let r = MetricsReport::from_predictions(preds, 3).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.auc, 1.0);
    }

    proptest! {
        #[test]
        fn matches_pair_count_and_inverts(
            raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 5.0).collect();
            let pos: Vec<bool> = raw.iter().map(|r| r.1).collect();
            if let Some(a) = auc(&scores, &pos) {
                prop_assert!((a - brute(&scores, &pos)).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
                let inv: Vec<f64> = scores.iter().map(|s| -s).collect();
                prop_assert!((auc(&inv, &pos).unwrap() - (1.0 - a)).abs() < 1e-12);
            }
        }
    }
}
