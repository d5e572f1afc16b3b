//! Differentiable building blocks: linear maps, layer normalisation, GELU,
//! GEGLU, the post-norm feed-forward block, parameter storage and a
//! finite-difference gradient checker.

mod params;
mod tape;
mod tensor;

pub mod gradcheck;

pub use params::{Binder, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{log_sum_exp, softmax_in_place, Tensor};

use rand::Rng;

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    std_normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `y = x·W + b`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

pub fn layer_norm(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
    tape.layer_norm(x, scale, shift, LN_EPS)
}

/// `GELU(x·W + b) ⊙ (x·V + c)`.
pub fn geglu(tape: &mut Tape, x: Var, w: Var, v: Var, b: Var, c: Var) -> Result<Var> {
    if tape.shape(w) != tape.shape(v) {
        return Err(Error::shape(
            "geglu",
            format!("gate {:?} vs linear {:?}", tape.shape(w), tape.shape(v)),
        ));
    }
    let gate = linear(tape, x, w, Some(b))?;
    let gate = tape.gelu(gate);
    let lin = linear(tape, x, v, Some(c))?;
    tape.mul(gate, lin)
}

/// Uniform `±1/√fan_in` initialisation for a `fan_in × fan_out` weight.
pub fn init_weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound))
}

/// Weights of one post-norm feed-forward block.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub gate_w: Tensor,
    pub gate_b: Tensor,
    pub lin_w: Tensor,
    pub lin_b: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln_scale: Tensor,
    pub ln_shift: Tensor,
}

const FFN_FIELDS: [&str; 10] = [
    "w_in", "b_in", "gate_w", "gate_b", "lin_w", "lin_b", "w_out", "b_out", "ln_scale", "ln_shift",
];

impl FfnParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, width: usize, expansion: usize) -> Result<Self> {
        if width == 0 || expansion == 0 {
            return Err(Error::Invalid(
                "ffn width and expansion factor must be at least 1".into(),
            ));
        }
        let hidden = width * expansion;
        Ok(FfnParams {
            w_in: init_weight(rng, width, hidden),
            b_in: Tensor::zeros(1, hidden),
            gate_w: init_weight(rng, hidden, hidden),
            gate_b: Tensor::zeros(1, hidden),
            lin_w: init_weight(rng, hidden, hidden),
            lin_b: Tensor::zeros(1, hidden),
            w_out: init_weight(rng, hidden, width),
            b_out: Tensor::zeros(1, width),
            ln_scale: Tensor::full(1, width, 1.0),
            ln_shift: Tensor::zeros(1, width),
        })
    }

    pub fn insert_into(self, store: &mut ParamStore, prefix: &str) {
        let FfnParams {
            w_in,
            b_in,
            gate_w,
            gate_b,
            lin_w,
            lin_b,
            w_out,
            b_out,
            ln_scale,
            ln_shift,
        } = self;
        let tensors = [
            w_in, b_in, gate_w, gate_b, lin_w, lin_b, w_out, b_out, ln_scale, ln_shift,
        ];
        for (field, t) in FFN_FIELDS.iter().zip(tensors) {
            store.insert(format!("{prefix}.{field}"), t);
        }
    }
}

/// `LayerNorm(x + W_out·GEGLU(W_in·x))` using the parameters stored under
/// `prefix`.
pub fn ffn_block(tape: &mut Tape, binder: &mut Binder<'_>, prefix: &str, x: Var) -> Result<Var> {
    let mut p = |tape: &mut Tape, field: &str| binder.var(tape, &format!("{prefix}.{field}"));
    let w_in = p(tape, "w_in")?;
    let b_in = p(tape, "b_in")?;
    let gate_w = p(tape, "gate_w")?;
    let gate_b = p(tape, "gate_b")?;
    let lin_w = p(tape, "lin_w")?;
    let lin_b = p(tape, "lin_b")?;
    let w_out = p(tape, "w_out")?;
    let b_out = p(tape, "b_out")?;
    let ln_scale = p(tape, "ln_scale")?;
    let ln_shift = p(tape, "ln_shift")?;

    let expanded = linear(tape, x, w_in, Some(b_in))?;
    let gated = geglu(tape, expanded, gate_w, lin_w, gate_b, lin_b)?;
    let branch = linear(tape, gated, w_out, Some(b_out))?;
    let residual = tape.add(x, branch)?;
    layer_norm(tape, residual, ln_scale, ln_shift)
}

/// Runs `f` on a fresh tape, then differentiates its scalar output with
/// respect to every parameter in `params`. Parameters that `f` never touches
/// get zero gradients.
pub fn forward_backward<T>(
    params: &ParamStore,
    f: impl FnOnce(&mut Tape, &mut Binder<'_>) -> Result<(Var, T)>,
) -> Result<(f64, ParamStore, T)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let (out, extra) = f(&mut tape, &mut binder)?;
    let value = tape.scalar(out);
    let mut grads = tape.backward(out)?;
    let grad_store = binder.collect_grads(&mut grads);
    Ok((value, grad_store, extra))
}

pub fn value_and_grad(
    params: &ParamStore,
    f: impl FnOnce(&mut Tape, &mut Binder<'_>) -> Result<Var>,
) -> Result<(f64, ParamStore)> {
    let (v, g, ()) = forward_backward(params, |t, b| Ok((f(t, b)?, ())))?;
    Ok((v, g))
}
