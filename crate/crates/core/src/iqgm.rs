//! Internal query generation.
//!
//! An instance classifier scores every instance; for each subtype the top
//! `K1 = max(1, ⌊r1·n⌋)` probabilities give a confidence factor
//! `cf = mean − std`. If the best factor beats every other by more than
//! `beta`, that subtype's query averages its top-`K1` features and every other
//! subtype averages its top-`K2`; otherwise all subtypes use top-`K2`.
//!
//! Selection is hard indexing and carries no gradient. The averaging of the
//! selected feature rows does.

use crate::error::{Error, Result};
use crate::nnprims::{linear, Binder, Tape, Tensor, Var};

pub const CLS_W: &str = "iqgm.cls.w";
pub const CLS_B: &str = "iqgm.cls.b";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IqgmConfig {
    pub r1: f64,
    pub r2: f64,
    pub beta: f64,
}

impl Default for IqgmConfig {
    fn default() -> Self {
        IqgmConfig {
            r1: 0.1,
            r2: 0.01,
            beta: 0.0,
        }
    }
}

impl IqgmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r2 > 0.0 && self.r2 <= self.r1 && self.r1 <= 1.0) {
            return Err(Error::Invalid(format!(
                "iqgm ratios need 0 < r2 <= r1 <= 1, got r1={} r2={}",
                self.r1, self.r2
            )));
        }
        if !(-1.0..=1.0).contains(&self.beta) {
            return Err(Error::Invalid(format!("iqgm.beta {} outside [-1, 1]", self.beta)));
        }
        Ok(())
    }

    /// `(K1, K2)` for a bag of `n` instances.
    pub fn top_k(&self, n: usize) -> (usize, usize) {
        let k = |r: f64| ((r * n as f64).floor() as usize).clamp(1, n.max(1));
        (k(self.r1), k(self.r2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceProbs {
    pub logits: Tensor,
    pub probs: Tensor,
}

impl InstanceProbs {
    pub fn from_logits(logits: Tensor) -> Self {
        let probs = logits.softmax_rows();
        InstanceProbs { logits, probs }
    }

    pub fn num_instances(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }
}

/// Instance logits `F·W + b` on the tape, with the classifier read from the
/// binder.
pub fn instance_logits(tape: &mut Tape, binder: &mut Binder<'_>, features: Var) -> Result<Var> {
    let w = binder.var(tape, CLS_W)?;
    let b = binder.var(tape, CLS_B)?;
    if tape.shape(features)[0] == 0 {
        return Err(Error::Invalid("bag has no instances".into()));
    }
    linear(tape, features, w, Some(b))
}

/// Forward-only instance probabilities.
pub fn instance_probs(features: &Tensor, w: &Tensor, b: &Tensor) -> Result<InstanceProbs> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let w = tape.constant(w.clone());
    let b = tape.constant(b.clone());
    if features.rows() == 0 {
        return Err(Error::Invalid("bag has no instances".into()));
    }
    let logits = linear(&mut tape, f, w, Some(b))?;
    Ok(InstanceProbs::from_logits(tape.value(logits).clone()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Confidence {
    pub mean: f64,
    pub std: f64,
    pub cf: f64,
}

/// Mean minus population standard deviation of the given top probabilities.
pub fn confidence_factor(top: &[f64]) -> Result<Confidence> {
    if top.is_empty() {
        return Err(Error::Invalid("confidence factor of an empty set".into()));
    }
    let k = top.len() as f64;
    let mean = top.iter().sum::<f64>() / k;
    let std = (top.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / k).sqrt();
    Ok(Confidence {
        mean,
        std,
        cf: mean - std,
    })
}

/// Instance indices sorted by descending probability in column `class`, ties
/// broken by the lower index.
pub fn rank_instances(probs: &Tensor, class: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.rows()).collect();
    idx.sort_by(|&a, &b| {
        probs
            .get(b, class)
            .partial_cmp(&probs.get(a, class))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceReport {
    pub cf: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub k1: usize,
    pub k2: usize,
    pub confident_subtype: Option<usize>,
}

/// The subtype whose factor exceeds every other by more than `beta`, if any.
pub fn confident_subtype(cf: &[f64], beta: f64) -> Option<usize> {
    let best = cf
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, &v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((i, v)),
        })?
        .0;
    cf.iter()
        .enumerate()
        .all(|(j, &v)| j == best || cf[best] - beta > v)
        .then_some(best)
}

/// Which instances feed each subtype's query.
#[derive(Clone, Debug, PartialEq)]
pub struct IqPlan {
    pub report: ConfidenceReport,
    pub selections: Vec<Vec<usize>>,
}

impl IqPlan {
    /// `N × n` averaging matrix: row `i` holds `1/|S_i|` at the selected
    /// instances.
    pub fn averaging_matrix(&self, n: usize) -> Tensor {
        let mut m = Tensor::zeros(self.selections.len(), n);
        for (i, sel) in self.selections.iter().enumerate() {
            let w = 1.0 / sel.len() as f64;
            for &j in sel {
                m.set(i, j, w);
            }
        }
        m
    }
}

pub fn plan_iq(probs: &Tensor, cfg: &IqgmConfig) -> Result<IqPlan> {
    cfg.validate()?;
    let n = probs.rows();
    if n == 0 {
        return Err(Error::Invalid("bag has no instances".into()));
    }
    let (k1, k2) = cfg.top_k(n);
    let classes = probs.cols();
    let mut ranked = Vec::with_capacity(classes);
    let (mut cf, mut means, mut stds) = (vec![], vec![], vec![]);
    for c in 0..classes {
        let order = rank_instances(probs, c);
        let top: Vec<f64> = order[..k1].iter().map(|&i| probs.get(i, c)).collect();
        let conf = confidence_factor(&top)?;
        cf.push(conf.cf);
        means.push(conf.mean);
        stds.push(conf.std);
        ranked.push(order);
    }
    let confident = confident_subtype(&cf, cfg.beta);
    let selections = ranked
        .into_iter()
        .enumerate()
        .map(|(c, order)| {
            let k = if confident == Some(c) { k1 } else { k2 };
            order[..k].to_vec()
        })
        .collect();
    Ok(IqPlan {
        report: ConfidenceReport {
            cf,
            means,
            stds,
            k1,
            k2,
            confident_subtype: confident,
        },
        selections,
    })
}

/// `IQ = A·F` on the tape, so gradients reach `features`.
pub fn aggregate_iq(tape: &mut Tape, features: Var, plan: &IqPlan) -> Result<Var> {
    let n = tape.shape(features)[0];
    let a = tape.constant(plan.averaging_matrix(n));
    tape.matmul(a, features)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InternalQueryResult {
    pub iq: Tensor,
    pub confident_subtype: Option<usize>,
    pub report: ConfidenceReport,
}

pub fn generate_iq(
    probs: &InstanceProbs,
    features: &Tensor,
    cfg: &IqgmConfig,
) -> Result<InternalQueryResult> {
    if features.rows() != probs.num_instances() {
        return Err(Error::shape(
            "generate_iq",
            format!("{} feature rows vs {} probability rows", features.rows(), probs.num_instances()),
        ));
    }
    let plan = plan_iq(&probs.probs, cfg)?;
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let iq = aggregate_iq(&mut tape, f, &plan)?;
    Ok(InternalQueryResult {
        iq: tape.value(iq).clone(),
        confident_subtype: plan.report.confident_subtype,
        report: plan.report,
    })
}
