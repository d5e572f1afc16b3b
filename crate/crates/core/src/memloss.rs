//! Class-center memory bank, contrastive loss and the combined objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bagstore::FeatureBag;
use crate::error::{Error, Result};
use crate::iqgm::IqgmConfig;
use crate::mdm::{self, Forward, MdmConfig};
use crate::nnprims::gradcheck::{check_gradients, BlockReport, GradCheckOptions};
use crate::nnprims::{Binder, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_ALPHA_CL: f64 = 0.5;

const DEGENERATE_NORM: f64 = 1e-8;

/// Unit-norm class centers, one row per subtype.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    centers: Tensor,
    pub momentum: f64,
    pub tau: f64,
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

impl MemoryBank {
    /// Builds a bank from explicit centers, normalizing every row.
    pub fn new(centers: Tensor, momentum: f64, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Invalid(format!("loss.momentum {momentum} outside [0, 1]")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Invalid(format!("loss.tau {tau} must be positive")));
        }
        let mut c = centers;
        for r in 0..c.rows() {
            let row = normalized(c.row(r))?;
            c.row_mut(r).copy_from_slice(&row);
        }
        Ok(MemoryBank { centers: c, momentum, tau })
    }

    /// Mean of the normalized tokens of each class, normalized again.
    pub fn from_tokens<'a>(
        tokens: impl IntoIterator<Item = (&'a [f64], usize)>,
        num_classes: usize,
        dim: usize,
        momentum: f64,
        tau: f64,
    ) -> Result<Self> {
        let mut sums = Tensor::zeros(num_classes, dim);
        let mut counts = vec![0usize; num_classes];
        for (tok, class) in tokens {
            if class >= num_classes || tok.len() != dim {
                return Err(Error::shape(
                    "MemoryBank::from_tokens",
                    format!("token of width {} for class {class}", tok.len()),
                ));
            }
            let unit = normalized(tok)?;
            for (s, u) in sums.row_mut(class).iter_mut().zip(&unit) {
                *s += u;
            }
            counts[class] += 1;
        }
        for (k, &count) in counts.iter().enumerate() {
            if count == 0 {
                return Err(Error::EmptyClass(k));
            }
            let row = sums.row_mut(k);
            row.iter_mut().for_each(|v| *v /= count as f64);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < DEGENERATE_NORM {
                return Err(Error::DegenerateCenter(k));
            }
        }
        MemoryBank::new(sums, momentum, tau)
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    /// `c_k ← normalize(m·c_k + (1−m)·normalize(f))`.
    pub fn update(&mut self, class: usize, token: &[f64]) -> Result<()> {
        if class >= self.num_classes() || token.len() != self.centers.cols() {
            return Err(Error::shape(
                "MemoryBank::update",
                format!("class {class}, token width {}", token.len()),
            ));
        }
        if !token.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let f = normalized(token)?;
        let m = self.momentum;
        let mixed: Vec<f64> = self
            .centers
            .row(class)
            .iter()
            .zip(&f)
            .map(|(c, f)| m * c + (1.0 - m) * f)
            .collect();
        let row = normalized(&mixed)?;
        self.centers.row_mut(class).copy_from_slice(&row);
        Ok(())
    }
}

/// True-label token of every training bag under the current parameters.
pub fn init_memory(
    params: &ParamStore,
    mdm_cfg: &MdmConfig,
    iq_cfg: &IqgmConfig,
    bags: &[FeatureBag],
    momentum: f64,
    tau: f64,
) -> Result<MemoryBank> {
    let mut tokens = Vec::with_capacity(bags.len());
    for bag in bags {
        let mut tape = Tape::new();
        let mut b = Binder::new(params);
        let f = tape.constant(bag.to_tensor());
        let fw = mdm::forward(&mut tape, &mut b, mdm_cfg, iq_cfg, f)?;
        let tok = tape.value(fw.tokens);
        if bag.label >= tok.rows() {
            return Err(Error::Invalid(format!("bag {} label {} out of range", bag.id, bag.label)));
        }
        tokens.push((tok.row(bag.label).to_vec(), bag.label));
    }
    MemoryBank::from_tokens(
        tokens.iter().map(|(t, c)| (t.as_slice(), *c)),
        mdm_cfg.num_classes,
        mdm_cfg.model_dim,
        momentum,
        tau,
    )
}

/// `−log softmax(⟨normalize(f), C⟩ / τ)[label]`; the centers are constants.
pub fn contrastive_loss(tape: &mut Tape, token: Var, bank: &MemoryBank, label: usize) -> Result<Var> {
    if label >= bank.num_classes() {
        return Err(Error::Invalid(format!("label {label} for {} centers", bank.num_classes())));
    }
    let unit = tape.l2_normalize_rows(token)?;
    let c_t = tape.constant(bank.centers.transpose());
    let sims = tape.matmul(unit, c_t)?;
    let scaled = tape.scale(sims, 1.0 / bank.tau);
    tape.cross_entropy(scaled, label)
}

pub fn ce_loss(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    tape.cross_entropy(logits, label)
}

/// Cross-entropy of the per-class maximum instance logit.
pub fn instance_ce(tape: &mut Tape, instance_logits: Var, label: usize) -> Result<Var> {
    if tape.shape(instance_logits)[0] == 0 {
        return Err(Error::Invalid("bag has no instances".into()));
    }
    let pooled = tape.max_rows(instance_logits);
    tape.cross_entropy(pooled, label)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_cel1: f64,
    pub l_cel2: f64,
    pub l_cl: f64,
    pub alpha_loss: f64,
    pub total: f64,
}

/// `L_CEL1 + L_CEL2 + α·L_CL` on the tape.
pub fn total_loss(
    tape: &mut Tape,
    fw: &Forward,
    bank: &MemoryBank,
    label: usize,
    alpha_loss: f64,
) -> Result<(Var, LossBreakdown)> {
    let l1 = instance_ce(tape, fw.instance_logits, label)?;
    let l2 = ce_loss(tape, fw.bag_logits, label)?;
    let tok = tape.select_rows(fw.tokens, &[label])?;
    let lcl = contrastive_loss(tape, tok, bank, label)?;
    let ce = tape.add(l1, l2)?;
    let weighted = tape.scale(lcl, alpha_loss);
    let total = tape.add(ce, weighted)?;
    let breakdown = LossBreakdown {
        l_cel1: tape.scalar(l1),
        l_cel2: tape.scalar(l2),
        l_cl: tape.scalar(lcl),
        alpha_loss,
        total: tape.scalar(total),
    };
    Ok((total, breakdown))
}

/// Forward pass plus combined loss for one bag.
#[allow(clippy::too_many_arguments)]
pub fn model_loss(
    tape: &mut Tape,
    b: &mut Binder<'_>,
    mdm_cfg: &MdmConfig,
    iq_cfg: &IqgmConfig,
    features: Var,
    bank: &MemoryBank,
    label: usize,
    alpha_loss: f64,
) -> Result<(Var, LossBreakdown, Forward)> {
    let fw = mdm::forward(tape, b, mdm_cfg, iq_cfg, features)?;
    let (total, parts) = total_loss(tape, &fw, bank, label, alpha_loss)?;
    Ok((total, parts, fw))
}

/// Setup for checking the combined loss against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct LossCheck {
    pub instances: usize,
    pub mdm: MdmConfig,
    pub iqgm: IqgmConfig,
    pub tau: f64,
    pub alpha_loss: f64,
    pub seed: u64,
    pub step: f64,
}

impl Default for LossCheck {
    fn default() -> Self {
        LossCheck {
            instances: 12,
            mdm: MdmConfig {
                input_dim: 16,
                model_dim: 16,
                num_heads: 2,
                num_classes: 2,
                ffn_expansion: 2,
                ..MdmConfig::default()
            },
            iqgm: IqgmConfig {
                r1: 0.25,
                r2: 0.1,
                beta: 0.0,
            },
            tau: DEFAULT_TAU,
            alpha_loss: DEFAULT_ALPHA_CL,
            seed: 0,
            step: 1e-4,
        }
    }
}

/// Relative error of every parameter block of the combined loss on one
/// random bag, with the memory bank built from one random bag per class.
pub fn check_loss_gradients(setup: &LossCheck) -> Result<Vec<BlockReport>> {
    let cfg = &setup.mdm;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let params = mdm::init_params(cfg, &mut rng)?;
    let mut bag = |label: usize| {
        let n = setup.instances;
        let feats = (0..n * cfg.input_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        FeatureBag::new(format!("check{label}"), label, n, cfg.input_dim, feats)
    };
    let seeds = (0..cfg.num_classes).map(&mut bag).collect::<Result<Vec<_>>>()?;
    let label = cfg.num_classes - 1;
    let target = bag(label)?;
    let bank = init_memory(&params, cfg, &setup.iqgm, &seeds, DEFAULT_MOMENTUM, setup.tau)?;
    let feats = target.to_tensor();
    let f = |t: &mut Tape, b: &mut Binder<'_>| {
        let x = t.constant(feats.clone());
        Ok(model_loss(t, b, cfg, &setup.iqgm, x, &bank, label, setup.alpha_loss)?.0)
    };
    check_gradients(&params, &f, GradCheckOptions { step: setup.step })
}
