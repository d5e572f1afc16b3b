//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The per-block error is `max|analytic − numeric| / max(max|analytic|,
//! max|numeric|)`, i.e. the infinity-norm error relative to the block's
//! largest gradient entry. Blocks whose gradient is identically zero on both
//! routes report 0.

use crate::error::Result;
use crate::nnprims::params::{Binder, ParamStore};
use crate::nnprims::tape::{Tape, Var};
use crate::nnprims::value_and_grad;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub numel: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

/// Forward-only evaluation of a scalar computation.
pub fn evaluate(
    params: &ParamStore,
    f: &impl Fn(&mut Tape, &mut Binder<'_>) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let out = f(&mut tape, &mut binder)?;
    Ok(tape.scalar(out))
}

/// Numeric gradient of `f` by central differences on every scalar of every
/// parameter.
pub fn numeric_gradient(
    params: &ParamStore,
    f: &impl Fn(&mut Tape, &mut Binder<'_>) -> Result<Var>,
    step: f64,
) -> Result<ParamStore> {
    let mut work = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.get(name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let plus = evaluate(&work, f)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let minus = evaluate(&work, f)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            out.get_mut(name).unwrap().data_mut()[i] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}

pub fn compare(analytic: &ParamStore, numeric: &ParamStore) -> Vec<BlockReport> {
    analytic
        .iter()
        .map(|(name, a)| {
            let n = numeric.get(name).expect("numeric gradient has the same blocks");
            let max_abs_error = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let scale = a.max_abs().max(n.max_abs());
            let max_rel_error = if scale == 0.0 {
                0.0
            } else {
                max_abs_error / scale
            };
            BlockReport {
                name: name.to_owned(),
                numel: a.len(),
                max_abs_error,
                max_rel_error,
            }
        })
        .collect()
}

pub fn check_gradients(
    params: &ParamStore,
    f: &impl Fn(&mut Tape, &mut Binder<'_>) -> Result<Var>,
    options: GradCheckOptions,
) -> Result<Vec<BlockReport>> {
    let (_, analytic) = value_and_grad(params, f)?;
    let numeric = numeric_gradient(params, f, options.step)?;
    Ok(compare(&analytic, &numeric))
}
