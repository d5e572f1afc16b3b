//! Deep projection layer and the multiplex detection module.
//!
//! Instance features pass through the projection layer, then two query sets
//! attend over them: the internal queries from [`crate::iqgm`] and a trainable
//! variational query matrix. Per head the two attention maps are mixed with
//! weight `α`, the result is projected and added back onto the (projected)
//! internal queries. One feed-forward block, one self-attention over the
//! subtype tokens and a second feed-forward block follow; the bag
//! representation is the mean of the resulting tokens.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::iqgm::{self, aggregate_iq, plan_iq, ConfidenceReport, IqgmConfig};
use crate::nnprims::{
    ffn_block, init_weight, layer_norm, linear, Binder, FfnParams, ParamStore, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaMode {
    Fixed,
    /// `alpha_hi` when a confident subtype exists, `alpha_lo` otherwise.
    Confidence,
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlphaMode::Fixed => "fixed",
            AlphaMode::Confidence => "confidence",
        })
    }
}

impl FromStr for AlphaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(AlphaMode::Fixed),
            "confidence" | "confidence-driven" => Ok(AlphaMode::Confidence),
            _ => Err(Error::Invalid(format!("unknown alpha mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdmConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub ffn_expansion: usize,
    pub alpha: f64,
    pub alpha_mode: AlphaMode,
    pub alpha_hi: f64,
    pub alpha_lo: f64,
}

impl Default for MdmConfig {
    fn default() -> Self {
        MdmConfig {
            input_dim: 1024,
            model_dim: 512,
            num_heads: 8,
            num_classes: 2,
            ffn_expansion: 4,
            alpha: 0.5,
            alpha_mode: AlphaMode::Fixed,
            alpha_hi: 0.7,
            alpha_lo: 0.3,
        }
    }
}

impl MdmConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.input_dim == 0 || self.model_dim == 0 || self.num_classes == 0 {
            return bad("input_dim, model_dim and num_classes must be positive".into());
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.num_heads
            ));
        }
        if self.ffn_expansion == 0 {
            return bad("ffn expansion factor must be at least 1".into());
        }
        for (name, a) in [("alpha", self.alpha), ("alpha_hi", self.alpha_hi), ("alpha_lo", self.alpha_lo)] {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("mdm.{name} {a} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn mixing_weight(&self, confident: Option<usize>) -> f64 {
        match self.alpha_mode {
            AlphaMode::Fixed => self.alpha,
            AlphaMode::Confidence if confident.is_some() => self.alpha_hi,
            AlphaMode::Confidence => self.alpha_lo,
        }
    }
}

/// Fresh parameters for the full model, instance classifier included.
pub fn init_params<R: Rng + ?Sized>(cfg: &MdmConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let (d, dm, n) = (cfg.input_dim, cfg.model_dim, cfg.num_classes);
    let mut s = ParamStore::new();
    fn lin<R: Rng + ?Sized>(s: &mut ParamStore, rng: &mut R, name: &str, fi: usize, fo: usize, bias: bool) {
        s.insert(format!("{name}.w"), init_weight(rng, fi, fo));
        if bias {
            s.insert(format!("{name}.b"), Tensor::zeros(1, fo));
        }
    }
    let ln = |s: &mut ParamStore, name: &str, w: usize| {
        s.insert(format!("{name}.scale"), Tensor::full(1, w, 1.0));
        s.insert(format!("{name}.shift"), Tensor::zeros(1, w));
    };

    lin(&mut s, rng, "iqgm.cls", d, n, true);

    lin(&mut s, rng, "dpl.fc", d, dm, true);
    ln(&mut s, "dpl.ln", dm);
    lin(&mut s, rng, "dpl.proj", dm, dm, true);

    lin(&mut s, rng, "mdca.iq_proj", d, dm, true);
    let vq_dist = Normal::new(0.0, 1.0 / (dm as f64).sqrt()).expect("positive std");
    s.insert("mdca.vq", Tensor::from_fn(n, dm, |_, _| vq_dist.sample(rng)));
    ln(&mut s, "mdca.ln_iq", dm);
    ln(&mut s, "mdca.ln_vq", dm);
    ln(&mut s, "mdca.ln_kv", dm);
    for q in ["mdca.q1", "mdca.q2", "mdca.k", "mdca.v"] {
        lin(&mut s, rng, q, dm, dm, false);
    }
    lin(&mut s, rng, "mdca.out", dm, dm, true);
    FfnParams::init(rng, dm, cfg.ffn_expansion)?.insert_into(&mut s, "ffn1");

    for q in ["mhsa.q", "mhsa.k", "mhsa.v"] {
        lin(&mut s, rng, q, dm, dm, false);
    }
    lin(&mut s, rng, "mhsa.out", dm, dm, true);
    FfnParams::init(rng, dm, cfg.ffn_expansion)?.insert_into(&mut s, "ffn2");

    lin(&mut s, rng, "head", dm, n, true);
    Ok(s)
}

fn lin_vars(tape: &mut Tape, b: &mut Binder<'_>, name: &str, bias: bool) -> Result<(Var, Option<Var>)> {
    let w = b.var(tape, &format!("{name}.w"))?;
    let bb = if bias {
        Some(b.var(tape, &format!("{name}.b"))?)
    } else {
        None
    };
    Ok((w, bb))
}

fn apply_linear(tape: &mut Tape, b: &mut Binder<'_>, name: &str, x: Var, bias: bool) -> Result<Var> {
    let (w, bb) = lin_vars(tape, b, name, bias)?;
    linear(tape, x, w, bb)
}

fn apply_ln(tape: &mut Tape, b: &mut Binder<'_>, name: &str, x: Var) -> Result<Var> {
    let s = b.var(tape, &format!("{name}.scale"))?;
    let h = b.var(tape, &format!("{name}.shift"))?;
    layer_norm(tape, x, s, h)
}

/// `F′ = Linear(ReLU(LayerNorm(Linear(F))))`.
pub fn dpl(tape: &mut Tape, b: &mut Binder<'_>, features: Var) -> Result<Var> {
    let h = apply_linear(tape, b, "dpl.fc", features, true)?;
    let h = apply_ln(tape, b, "dpl.ln", h)?;
    let h = tape.relu(h);
    apply_linear(tape, b, "dpl.proj", h, true)
}

/// Attention weights captured during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    /// Per head, `N × n` attention of the internal queries.
    pub mt1: Vec<Tensor>,
    /// Per head, `N × n` attention of the variational queries.
    pub mt2: Vec<Tensor>,
    /// Per head, `α·mt1 + (1−α)·mt2`.
    pub combined: Vec<Tensor>,
    /// Per head, `N × N` subtype self-attention.
    pub self_attention: Vec<Tensor>,
    pub alpha: f64,
}

impl AttentionRecord {
    fn head_average(maps: &[Tensor]) -> Tensor {
        let mut acc = maps[0].clone();
        for m in &maps[1..] {
            acc.add_assign(m);
        }
        acc.scale(1.0 / maps.len() as f64)
    }

    pub fn mt1_mean(&self) -> Tensor {
        Self::head_average(&self.mt1)
    }

    pub fn mt2_mean(&self) -> Tensor {
        Self::head_average(&self.mt2)
    }

    pub fn combined_mean(&self) -> Tensor {
        Self::head_average(&self.combined)
    }

    /// Head-averaged combined attention of every subtype, min-max scaled to
    /// `[0, 1]` per subtype. A constant row maps to all zeros.
    pub fn normalized(&self) -> Tensor {
        let mut m = self.combined_mean();
        for r in 0..m.rows() {
            min_max_in_place(m.row_mut(r));
        }
        m
    }
}

pub fn min_max_in_place(row: &mut [f64]) {
    let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in row.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

fn head_attention(tape: &mut Tape, q: Var, k_t: Var, scale: f64) -> Result<Var> {
    let scores = tape.matmul(q, k_t)?;
    let scores = tape.scale(scores, scale);
    Ok(tape.softmax_rows(scores))
}

/// Dual-query cross-attention. `iq` must already be at model width.
pub fn mdca(
    tape: &mut Tape,
    b: &mut Binder<'_>,
    cfg: &MdmConfig,
    iq: Var,
    projected: Var,
    alpha: f64,
) -> Result<(Var, AttentionRecord)> {
    let dm = cfg.model_dim;
    if tape.shape(iq)[1] != dm || tape.shape(projected)[1] != dm {
        return Err(Error::shape(
            "mdca",
            format!("queries {:?} and keys {:?} must have width {dm}", tape.shape(iq), tape.shape(projected)),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let vq = b.var(tape, "mdca.vq")?;
    let q1 = apply_ln(tape, b, "mdca.ln_iq", iq)?;
    let q1 = apply_linear(tape, b, "mdca.q1", q1, false)?;
    let q2 = apply_ln(tape, b, "mdca.ln_vq", vq)?;
    let q2 = apply_linear(tape, b, "mdca.q2", q2, false)?;
    if tape.shape(q1) != tape.shape(q2) {
        return Err(Error::shape(
            "mdca",
            format!("internal queries {:?} vs variational {:?}", tape.shape(q1), tape.shape(q2)),
        ));
    }
    let kv = apply_ln(tape, b, "mdca.ln_kv", projected)?;
    let k = apply_linear(tape, b, "mdca.k", kv, false)?;
    let v = apply_linear(tape, b, "mdca.v", kv, false)?;

    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut record = AttentionRecord {
        alpha,
        ..Default::default()
    };
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (q1h, q2h) = (tape.slice_cols(q1, h * dk, dk)?, tape.slice_cols(q2, h * dk, dk)?);
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kh_t = tape.transpose(kh);
        let mt1 = head_attention(tape, q1h, kh_t, scale)?;
        let mt2 = head_attention(tape, q2h, kh_t, scale)?;
        let a = tape.scale(mt1, alpha);
        let c = tape.scale(mt2, 1.0 - alpha);
        let mixed = tape.add(a, c)?;
        record.mt1.push(tape.value(mt1).clone());
        record.mt2.push(tape.value(mt2).clone());
        record.combined.push(tape.value(mixed).clone());
        heads.push(tape.matmul(mixed, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = apply_linear(tape, b, "mdca.out", cat, true)?;
    Ok((tape.add(out, iq)?, record))
}

/// Multi-head self-attention over subtype tokens with a residual connection.
/// Returns the per-head attention maps alongside the output.
pub fn mhsa(tape: &mut Tape, b: &mut Binder<'_>, cfg: &MdmConfig, tokens: Var) -> Result<(Var, Vec<Tensor>)> {
    if tape.shape(tokens)[1] != cfg.model_dim || tape.shape(tokens)[0] == 0 {
        return Err(Error::shape("mhsa", format!("tokens {:?}", tape.shape(tokens))));
    }
    let q = apply_linear(tape, b, "mhsa.q", tokens, false)?;
    let k = apply_linear(tape, b, "mhsa.k", tokens, false)?;
    let v = apply_linear(tape, b, "mhsa.v", tokens, false)?;
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut maps = Vec::with_capacity(cfg.num_heads);
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kh_t = tape.transpose(kh);
        let att = head_attention(tape, qh, kh_t, scale)?;
        maps.push(tape.value(att).clone());
        heads.push(tape.matmul(att, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = apply_linear(tape, b, "mhsa.out", cat, true)?;
    Ok((tape.add(out, tokens)?, maps))
}

/// Bag logits from the bag representation.
pub fn classify(tape: &mut Tape, b: &mut Binder<'_>, bag_repr: Var) -> Result<Var> {
    apply_linear(tape, b, "head", bag_repr, true)
}

/// Everything one forward pass produces, as tape handles plus captured
/// side information.
pub struct Forward {
    pub instance_logits: Var,
    pub iq: Var,
    pub tokens: Var,
    pub bag_repr: Var,
    pub bag_logits: Var,
    pub record: AttentionRecord,
    pub iq_report: ConfidenceReport,
}

/// MDM proper: projection layer, cross-attention, FFN, self-attention, FFN,
/// token mean. `iq` is the `N × d` internal query matrix.
pub fn mdm_forward(
    tape: &mut Tape,
    b: &mut Binder<'_>,
    cfg: &MdmConfig,
    features: Var,
    iq: Var,
    confident: Option<usize>,
) -> Result<(Var, Var, AttentionRecord)> {
    let [n, d] = tape.shape(features);
    if n == 0 || d != cfg.input_dim {
        return Err(Error::shape("mdm_forward", format!("features {n}x{d}, expected width {}", cfg.input_dim)));
    }
    if tape.shape(iq) != [cfg.num_classes, cfg.input_dim] {
        return Err(Error::shape("mdm_forward", format!("iq {:?}", tape.shape(iq))));
    }
    let projected = dpl(tape, b, features)?;
    let iq_proj = apply_linear(tape, b, "mdca.iq_proj", iq, true)?;
    let alpha = cfg.mixing_weight(confident);
    let (tokens, mut record) = mdca(tape, b, cfg, iq_proj, projected, alpha)?;
    let tokens = ffn_block(tape, b, "ffn1", tokens)?;
    let (tokens, maps) = mhsa(tape, b, cfg, tokens)?;
    record.self_attention = maps;
    let tokens = ffn_block(tape, b, "ffn2", tokens)?;
    let bag_repr = tape.mean_rows(tokens);
    Ok((tokens, bag_repr, record))
}

/// Full model forward: instance classifier, internal queries, MDM and the
/// bag classifier.
pub fn forward(
    tape: &mut Tape,
    b: &mut Binder<'_>,
    cfg: &MdmConfig,
    iq_cfg: &IqgmConfig,
    features: Var,
) -> Result<Forward> {
    let instance_logits = iqgm::instance_logits(tape, b, features)?;
    let probs = tape.value(instance_logits).softmax_rows();
    let plan = plan_iq(&probs, iq_cfg)?;
    let iq = aggregate_iq(tape, features, &plan)?;
    let (tokens, bag_repr, record) =
        mdm_forward(tape, b, cfg, features, iq, plan.report.confident_subtype)?;
    let bag_logits = classify(tape, b, bag_repr)?;
    Ok(Forward {
        instance_logits,
        iq,
        tokens,
        bag_repr,
        bag_logits,
        record,
        iq_report: plan.report,
    })
}
