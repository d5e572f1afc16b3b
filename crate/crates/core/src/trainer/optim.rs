use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nnprims::ParamStore;

/// `0.5·base·(1 + cos(π·t/T))`, clamped at zero.
pub fn cosine_lr(t: usize, total: usize, base_lr: f64) -> f64 {
    let total = total.max(1);
    let t = t.min(total);
    (0.5 * base_lr * (1.0 + (PI * t as f64 / total as f64).cos())).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayMode {
    /// Shrinks parameters directly, outside the adaptive update.
    Decoupled,
    /// Adds `wd·p` to the gradient.
    Coupled,
}

impl fmt::Display for DecayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecayMode::Decoupled => "decoupled",
            DecayMode::Coupled => "coupled",
        })
    }
}

impl FromStr for DecayMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoupled" => Ok(DecayMode::Decoupled),
            "coupled" | "l2" => Ok(DecayMode::Coupled),
            _ => Err(Error::Invalid(format!("unknown decay mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: DecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-3,
            decay: DecayMode::Decoupled,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step. Gradients are checked before anything is
/// touched, so a blow-up leaves parameters and state unchanged.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", format!("{name}: {:?} vs {:?}", g.shape(), p.shape())));
        }
        if !g.data().iter().all(|v| v.is_finite()) {
            return Err(Error::GradientBlowUp(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let wd = cfg.weight_decay;
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above").data();
        let m = state.m.get_mut(name).expect("state matches params").data_mut();
        let v = state.v.get_mut(name).expect("state matches params").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = match cfg.decay {
                DecayMode::Coupled => g[i] + wd * *w,
                DecayMode::Decoupled => g[i],
            };
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            if cfg.decay == DecayMode::Decoupled {
                *w -= lr * wd * *w;
            }
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
