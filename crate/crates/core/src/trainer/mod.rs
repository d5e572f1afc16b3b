//! Training loop, evaluation, baselines and checkpoints.

mod checkpoint;
mod metrics;
mod optim;

pub use checkpoint::{
    check_compatible, checkpoint_bytes, checkpoint_from_bytes, read_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use metrics::{argmax, auc, MetricsReport, Prediction};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState, DecayMode};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bagstore::FeatureBag;
use crate::error::{Error, Result};
use crate::iqgm::IqgmConfig;
use crate::mdm::{self, AttentionRecord, MdmConfig};
use crate::memloss::{self, init_memory, model_loss, LossBreakdown, MemoryBank};
use crate::nnprims::{forward_backward, init_weight, linear, Binder, ParamStore, Tape, Tensor, Var};

pub const BASELINE_W: &str = "baseline.cls.w";
pub const BASELINE_B: &str = "baseline.cls.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Mdmil,
    MeanPool,
    MaxPool,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Mdmil => "mdmil",
            Method::MeanPool => "mean",
            Method::MaxPool => "max",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mdmil" => Ok(Method::Mdmil),
            "mean" | "mean-pool" => Ok(Method::MeanPool),
            "max" | "max-pool" => Ok(Method::MaxPool),
            _ => Err(Error::Invalid(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub momentum: f64,
    pub alpha_cl: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: memloss::DEFAULT_TAU,
            momentum: memloss::DEFAULT_MOMENTUM,
            alpha_cl: memloss::DEFAULT_ALPHA_CL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub max_drop: f64,
    pub method: Method,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            base_lr: 2e-4,
            adam: AdamConfig::default(),
            seed: 0,
            max_drop: 0.1,
            method: Method::Mdmil,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Invalid(format!("train.lr {} must be positive", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.max_drop) {
            return Err(Error::Invalid(format!("train.max_drop {} outside [0, 1)", self.max_drop)));
        }
        if self.epochs == 0 {
            return Err(Error::Invalid("train.epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameters together with everything needed to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub method: Method,
    pub mdm: MdmConfig,
    pub iqgm: IqgmConfig,
    pub params: ParamStore,
}

/// Fresh linear classifier over pooled features.
pub fn init_baseline_params<R: Rng + ?Sized>(input_dim: usize, num_classes: usize, rng: &mut R) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(BASELINE_W, init_weight(rng, input_dim, num_classes));
    s.insert(BASELINE_B, Tensor::zeros(1, num_classes));
    s
}

/// Column mean or max of a bag.
pub fn pool_features(features: &Tensor, method: Method) -> Result<Tensor> {
    if features.rows() == 0 {
        return Err(Error::Invalid("bag has no instances".into()));
    }
    match method {
        Method::MeanPool => Ok(features.mean_rows()),
        Method::MaxPool => Ok(features.max_rows().0),
        Method::Mdmil => Err(Error::Invalid("mdmil is not a pooling baseline".into())),
    }
}

/// Pooled-feature logits on the tape.
pub fn baseline_pool(tape: &mut Tape, b: &mut Binder<'_>, features: Var, method: Method) -> Result<Var> {
    if tape.shape(features)[0] == 0 {
        return Err(Error::Invalid("bag has no instances".into()));
    }
    let pooled = match method {
        Method::MeanPool => tape.mean_rows(features),
        Method::MaxPool => tape.max_rows(features),
        Method::Mdmil => return Err(Error::Invalid("mdmil is not a pooling baseline".into())),
    };
    let w = b.var(tape, BASELINE_W)?;
    let bias = b.var(tape, BASELINE_B)?;
    linear(tape, pooled, w, Some(bias))
}

impl Model {
    /// Initial parameters drawn from `seed`.
    pub fn init(method: Method, mdm_cfg: MdmConfig, iq_cfg: IqgmConfig, seed: u64) -> Result<Model> {
        mdm_cfg.validate()?;
        iq_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match method {
            Method::Mdmil => mdm::init_params(&mdm_cfg, &mut rng)?,
            _ => init_baseline_params(mdm_cfg.input_dim, mdm_cfg.num_classes, &mut rng),
        };
        Ok(Model {
            method,
            mdm: mdm_cfg,
            iqgm: iq_cfg,
            params,
        })
    }

    /// Loads a checkpoint and checks it against the configured shapes.
    pub fn load(method: Method, mdm_cfg: MdmConfig, iq_cfg: IqgmConfig, path: impl AsRef<Path>) -> Result<Model> {
        let template = Model::init(method, mdm_cfg, iq_cfg, 0)?;
        let params = read_checkpoint(path)?;
        check_compatible(&params, &template.params)?;
        Ok(Model { params, ..template })
    }

    fn check_bag(&self, bag: &FeatureBag) -> Result<()> {
        if bag.feature_dim() != self.mdm.input_dim {
            return Err(Error::shape(
                "model",
                format!("bag {} has width {}, model expects {}", bag.id, bag.feature_dim(), self.mdm.input_dim),
            ));
        }
        if bag.label >= self.mdm.num_classes {
            return Err(Error::Invalid(format!(
                "bag {} label {} with {} classes",
                bag.id, bag.label, self.mdm.num_classes
            )));
        }
        Ok(())
    }

    fn logits(&self, tape: &mut Tape, b: &mut Binder<'_>, features: Var) -> Result<Var> {
        match self.method {
            Method::Mdmil => Ok(mdm::forward(tape, b, &self.mdm, &self.iqgm, features)?.bag_logits),
            m => baseline_pool(tape, b, features, m),
        }
    }

    /// Class probabilities of one bag.
    pub fn predict(&self, bag: &FeatureBag) -> Result<Vec<f64>> {
        self.check_bag(bag)?;
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params);
        let f = tape.constant(bag.to_tensor());
        let logits = self.logits(&mut tape, &mut b, f)?;
        Ok(tape.value(logits).softmax_rows().into_vec())
    }

    /// Attention maps and class probabilities of one bag.
    pub fn attention(&self, bag: &FeatureBag) -> Result<(AttentionRecord, Vec<f64>)> {
        if self.method != Method::Mdmil {
            return Err(Error::Invalid(format!("{} has no attention maps", self.method)));
        }
        self.check_bag(bag)?;
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params);
        let f = tape.constant(bag.to_tensor());
        let fw = mdm::forward(&mut tape, &mut b, &self.mdm, &self.iqgm, f)?;
        Ok((fw.record, tape.value(fw.bag_logits).softmax_rows().into_vec()))
    }

    /// Augmentation-free evaluation.
    pub fn evaluate(&self, bags: &[FeatureBag]) -> Result<MetricsReport> {
        let mut preds = Vec::with_capacity(bags.len());
        for bag in bags {
            let probs = self.predict(bag)?;
            preds.push(Prediction {
                id: bag.id.clone(),
                label: bag.label,
                predicted: argmax(&probs),
                probs,
            });
        }
        MetricsReport::from_predictions(preds, self.mdm.num_classes)
    }
}

/// `⌊u·n⌋`, capped so at least one instance survives.
pub fn drop_count(n: usize, u: f64) -> usize {
    ((u * n as f64).floor() as usize).min(n.saturating_sub(1))
}

/// Removes `⌊u·n⌋` random instances, `u ~ U(0, max_drop)`.
pub fn augment_drop<R: Rng + ?Sized>(bag: &FeatureBag, max_drop: f64, rng: &mut R) -> Result<FeatureBag> {
    let u = if max_drop > 0.0 { rng.gen_range(0.0..max_drop) } else { 0.0 };
    drop_instances(bag, u, rng)
}

pub fn drop_instances<R: Rng + ?Sized>(bag: &FeatureBag, u: f64, rng: &mut R) -> Result<FeatureBag> {
    let n = bag.num_instances();
    let k = drop_count(n, u);
    if k == 0 {
        return Ok(bag.clone());
    }
    let mut dropped = vec![false; n];
    for i in sample(rng, n, k) {
        dropped[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !dropped[i]).collect();
    bag.select_instances(&keep)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_auc: f64,
    pub lr: f64,
}

pub fn write_epoch_log(logs: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = metrics::csv_writer(path)?;
    let e = |e: csv::Error| Error::Manifest(e.to_string());
    w.write_record(["epoch", "train_loss", "val_acc", "val_auc", "lr"]).map_err(e)?;
    for l in logs {
        w.write_record([
            l.epoch.to_string(),
            l.train_loss.to_string(),
            l.val_acc.to_string(),
            l.val_auc.to_string(),
            l.lr.to_string(),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation AUC.
    pub best: Model,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: Model,
    pub log: Vec<EpochLog>,
    pub bank: Option<MemoryBank>,
}

fn selection_key(m: &MetricsReport) -> (f64, f64) {
    let auc = if m.auc.is_nan() { f64::NEG_INFINITY } else { m.auc };
    (auc, m.accuracy)
}

/// One optimisation step on one bag; returns the loss breakdown (the
/// baselines report only the bag cross-entropy).
fn step(
    model: &mut Model,
    bank: Option<&mut MemoryBank>,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    bag: &FeatureBag,
    lr: f64,
) -> Result<LossBreakdown> {
    let label = bag.label;
    let feats = bag.to_tensor();
    let (parts, grads, token) = match (model.method, bank.as_deref()) {
        (Method::Mdmil, Some(bank)) => {
            let (_, g, (parts, tok)) = forward_backward(&model.params, |t, b| {
                let x = t.constant(feats);
                let (total, parts, fw) =
                    model_loss(t, b, &model.mdm, &model.iqgm, x, bank, label, loss_cfg.alpha_cl)?;
                let tok = t.value(fw.tokens).row(label).to_vec();
                Ok((total, (parts, tok)))
            })?;
            (parts, g, Some(tok))
        }
        (Method::Mdmil, None) => return Err(Error::Invalid("mdmil training needs a memory bank".into())),
        (m, _) => {
            let (v, g, ()) = forward_backward(&model.params, |t, b| {
                let x = t.constant(feats);
                let logits = baseline_pool(t, b, x, m)?;
                Ok((memloss::ce_loss(t, logits, label)?, ()))
            })?;
            let parts = LossBreakdown {
                l_cel1: 0.0,
                l_cel2: v,
                l_cl: 0.0,
                alpha_loss: 0.0,
                total: v,
            };
            (parts, g, None)
        }
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite);
    }
    adam_step(&mut model.params, &grads, adam, lr, &cfg.adam)?;
    if let (Some(bank), Some(tok)) = (bank, token) {
        bank.update(label, &tok)?;
    }
    Ok(parts)
}

/// Trains from freshly initialised parameters. Initialisation, shuffling and
/// augmentation all derive from `cfg.seed`.
pub fn fit(
    mdm_cfg: &MdmConfig,
    iq_cfg: &IqgmConfig,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    train_bags: &[FeatureBag],
    val_bags: &[FeatureBag],
) -> Result<TrainOutcome> {
    let model = Model::init(cfg.method, mdm_cfg.clone(), *iq_cfg, cfg.seed)?;
    train(model, loss_cfg, cfg, train_bags, val_bags)
}

/// Per epoch: shuffle, then augment → forward → loss → backward → Adam →
/// memory update for every bag, then validate.
pub fn train(
    mut model: Model,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    train_bags: &[FeatureBag],
    val_bags: &[FeatureBag],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_bags.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    for bag in train_bags.iter().chain(val_bags) {
        model.check_bag(bag)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut bank = match model.method {
        Method::Mdmil => Some(init_memory(
            &model.params,
            &model.mdm,
            &model.iqgm,
            train_bags,
            loss_cfg.momentum,
            loss_cfg.tau,
        )?),
        _ => None,
    };
    let mut adam = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ParamStore, usize, (f64, f64))> = None;

    for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(epoch - 1, cfg.epochs, cfg.base_lr);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let bag = augment_drop(&train_bags[i], cfg.max_drop, &mut rng)?;
            let parts = step(&mut model, bank.as_mut(), &mut adam, cfg, loss_cfg, &bag, lr).map_err(|e| match e {
                Error::NonFinite => Error::NonFiniteLoss {
                    epoch,
                    bag: bag.id.clone(),
                    detail: "loss is not finite".into(),
                },
                other => other,
            })?;
            total += parts.total;
        }
        let train_loss = total / order.len() as f64;
        let (val_acc, val_auc) = if val_bags.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let report = model.evaluate(val_bags)?;
            let key = selection_key(&report);
            if best.as_ref().is_none_or(|b| key > b.2) {
                best = Some((model.params.clone(), epoch, key));
            }
            (report.accuracy, report.auc)
        };
        log::info!("epoch {epoch}: loss {train_loss:.6} val_acc {val_acc:.4} val_auc {val_auc:.4} lr {lr:.3e}");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_acc,
            val_auc,
            lr,
        });
    }

    let (best_params, best_epoch) = match best {
        Some((p, e, _)) => (p, e),
        None => (model.params.clone(), cfg.epochs),
    };
    let best = Model {
        params: best_params,
        ..model.clone()
    };
    if let Some(path) = &cfg.checkpoint {
        write_checkpoint(&best.params, path)?;
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
        bank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_mdm(d: usize, classes: usize) -> MdmConfig {
        MdmConfig {
            input_dim: d,
            model_dim: 8,
            num_heads: 2,
            num_classes: classes,
            ffn_expansion: 1,
            ..MdmConfig::default()
        }
    }

    fn rand_bag(rng: &mut ChaCha8Rng, id: &str, label: usize, n: usize, d: usize, shift: f32) -> FeatureBag {
        let feats = (0..n * d)
            .map(|i| rng.gen_range(-1.0f32..1.0) + if i % d == label { shift } else { 0.0 })
            .collect();
        FeatureBag::new(id, label, n, d, feats).unwrap()
    }

    #[test]
    fn drop_count_examples() {
        assert_eq!(drop_count(10, 0.0), 0);
        assert_eq!(drop_count(10, 0.1), 1);
        assert_eq!(drop_count(10, 0.0999), 0);
        assert_eq!(drop_count(1, 0.99), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bag = rand_bag(&mut rng, "x", 0, 10, 3, 0.0);
        assert_eq!(drop_instances(&bag, 0.0, &mut rng).unwrap(), bag);
        let out = drop_instances(&bag, 0.1, &mut rng).unwrap();
        assert_eq!(out.num_instances(), 9);
        let one = rand_bag(&mut rng, "y", 0, 1, 3, 0.0);
        for _ in 0..20 {
            assert_eq!(augment_drop(&one, 0.99, &mut rng).unwrap().num_instances(), 1);
        }
    }

    #[test]
    fn kept_instances_preserve_order() {
        let feats: Vec<f32> = (0..20).map(|v| v as f32).collect();
        let bag = FeatureBag::new("o", 0, 20, 1, feats).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = drop_instances(&bag, 0.5, &mut rng).unwrap();
        assert_eq!(out.num_instances(), 10);
        assert!(out.features().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn pooling_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::from_fn(3, 4, |_, _| rng.gen_range(-2.0..2.0));
        let mean = pool_features(&f, Method::MeanPool).unwrap();
        let max = pool_features(&f, Method::MaxPool).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..3).map(|r| f.get(r, c)).collect();
            assert!((mean.get(0, c) - col.iter().sum::<f64>() / 3.0).abs() < 1e-15);
            assert_eq!(max.get(0, c), col.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        let single = Tensor::row_vector(&[1.0, -2.0]);
        assert_eq!(pool_features(&single, Method::MeanPool).unwrap(), single);
        assert_eq!(pool_features(&single, Method::MaxPool).unwrap(), single);
        let constant = Tensor::full(4, 2, 0.25);
        assert_eq!(pool_features(&constant, Method::MeanPool).unwrap(), Tensor::full(1, 2, 0.25));
        assert_eq!(pool_features(&constant, Method::MaxPool).unwrap(), Tensor::full(1, 2, 0.25));
    }

    #[test]
    fn single_bag_overfits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bags = vec![rand_bag(&mut rng, "a", 1, 10, 6, 0.0)];
        let cfg = TrainConfig {
            epochs: 50,
            base_lr: 1e-3,
            max_drop: 0.0,
            seed: 3,
            method: Method::MeanPool,
            ..TrainConfig::default()
        };
        let out = fit(&tiny_mdm(6, 2), &IqgmConfig::default(), &LossConfig::default(), &cfg, &bags, &[]).unwrap();
        assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);
    }

    #[test]
    fn one_bag_per_class_overfits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bags = vec![rand_bag(&mut rng, "a", 0, 10, 6, 0.0), rand_bag(&mut rng, "b", 1, 10, 6, 0.0)];
        let cfg = TrainConfig {
            epochs: 25,
            base_lr: 1e-3,
            max_drop: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = fit(&tiny_mdm(6, 2), &IqgmConfig::default(), &LossConfig::default(), &cfg, &bags, &[]).unwrap();
        assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);
        assert_eq!(out.best_epoch, 25);
    }

    #[test]
    fn memory_needs_every_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bags = vec![rand_bag(&mut rng, "a", 1, 10, 6, 0.0)];
        let err = fit(&tiny_mdm(6, 2), &IqgmConfig::default(), &LossConfig::default(), &TrainConfig::default(), &bags, &[]);
        assert_eq!(err.err().unwrap().to_string(), "empty class 0");
    }

    #[test]
    fn same_seed_same_log_and_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train: Vec<_> = (0..6).map(|i| rand_bag(&mut rng, &format!("t{i}"), i % 2, 8, 5, 1.0)).collect();
        let val: Vec<_> = (0..4).map(|i| rand_bag(&mut rng, &format!("v{i}"), i % 2, 8, 5, 1.0)).collect();
        let cfg = TrainConfig {
            epochs: 3,
            base_lr: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || fit(&tiny_mdm(5, 2), &IqgmConfig::default(), &LossConfig::default(), &cfg, &train, &val).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        assert_eq!(a.best.params, b.best.params);
        assert_eq!(a.last.params, b.last.params);
        let r1 = a.best.evaluate(&val).unwrap();
        let r2 = a.best.evaluate(&val).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn easy_task_reaches_full_validation_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mk = |rng: &mut ChaCha8Rng, tag: &str, k: usize| -> Vec<FeatureBag> {
            (0..k).map(|i| rand_bag(rng, &format!("{tag}{i}"), i % 2, 12, 4, 3.0)).collect()
        };
        let train = mk(&mut rng, "t", 20);
        let val = mk(&mut rng, "v", 10);
        let cfg = TrainConfig {
            epochs: 20,
            base_lr: 2e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = fit(&tiny_mdm(4, 2), &IqgmConfig::default(), &LossConfig::default(), &cfg, &train, &val).unwrap();
        assert_eq!(out.log.iter().map(|l| l.val_acc).fold(0.0, f64::max), 1.0);

        let base = TrainConfig {
            method: Method::MeanPool,
            ..cfg
        };
        let out = fit(&tiny_mdm(4, 2), &IqgmConfig::default(), &LossConfig::default(), &base, &train, &val).unwrap();
        assert_eq!(out.best.evaluate(&val).unwrap().accuracy, 1.0);
    }

    #[test]
    fn checkpoint_written_and_reloaded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train: Vec<_> = (0..4).map(|i| rand_bag(&mut rng, &format!("t{i}"), i % 2, 6, 4, 1.0)).collect();
        let cfg = TrainConfig {
            epochs: 2,
            checkpoint: Some(path.clone()),
            ..TrainConfig::default()
        };
        let m = tiny_mdm(4, 2);
        let out = fit(&m, &IqgmConfig::default(), &LossConfig::default(), &cfg, &train, &train).unwrap();
        let back = Model::load(Method::Mdmil, m.clone(), IqgmConfig::default(), &path).unwrap();
        for (name, t) in back.params.iter() {
            let orig = out.best.params.get(name).unwrap();
            for (x, y) in t.data().iter().zip(orig.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let wrong = MdmConfig { model_dim: 4, ..m };
        assert!(Model::load(Method::Mdmil, wrong, IqgmConfig::default(), &path).is_err());
    }

    #[test]
    fn epoch_log_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_epoch_log(
            &[EpochLog {
                epoch: 1,
                train_loss: 0.5,
                val_acc: 1.0,
                val_auc: 0.75,
                lr: 2e-4,
            }],
            &path,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,train_loss,val_acc,val_auc,lr\n1,0.5,1,0.75,0.0002\n");
    }
}
