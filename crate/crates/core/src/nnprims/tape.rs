//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order. `backward` walks the indices in reverse and visits each
//! recorded operation once. Nodes whose inputs are all constants are skipped.

use crate::error::{Error, Result};
use crate::nnprims::tensor::{matmul_nt, matmul_tn, matmul_unchecked, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, idx: Vec<usize> },
    MeanRows(Var),
    MaxRows { x: Var, arg: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, label: usize, probs: Tensor },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one backward pass. Exclusively owned by the
/// computation that builds it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; zeros when `v` did not
    /// influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn check(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(op, detail()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(av.cols() == bv.rows(), "matmul", || {
            format!("{:?} times {:?}", av.shape(), bv.shape())
        })?;
        let out = matmul_unchecked(av, bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(av.shape() == bv.shape(), "add", || {
            format!("{:?} plus {:?}", av.shape(), bv.shape())
        })?;
        let out = av.zip_map(bv, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x + b` with `b` a `1 × cols` row added to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        check(bv.rows() == 1 && bv.cols() == xv.cols(), "add_row", || {
            format!("{:?} plus row {:?}", xv.shape(), bv.shape())
        })?;
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, v) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += v;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRowBroadcast(x, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(av.shape() == bv.shape(), "mul", || {
            format!("{:?} times {:?}", av.shape(), bv.shape())
        })?;
        let out = av.zip_map(bv, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(super::gelu_scalar);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Per-row normalisation to zero mean and unit population variance,
    /// followed by `scale`/`shift` (both `1 × cols`).
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let p = xv.cols();
        check(p >= 1, "layer_norm", || "zero-width rows".into())?;
        for (name, v) in [("scale", scale), ("shift", shift)] {
            let s = self.shape(v);
            check(s == [1, p], "layer_norm", || {
                format!("{name} shape {s:?} for width {p}")
            })?;
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / p as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let (sv, hv) = (self.value(scale), self.value(shift));
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((o, s), h) in out.row_mut(r).iter_mut().zip(sv.data()).zip(hv.data()) {
                *o = *o * s + h;
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        check(start + width <= xv.cols(), "slice_cols", || {
            format!("[{start}, {}) of {} columns", start + width, xv.cols())
        })?;
        let out = xv.slice_cols(start, width);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::concat_cols(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        check(idx.iter().all(|&i| i < xv.rows()), "select_rows", || {
            format!("index out of {} rows", xv.rows())
        })?;
        let out = xv.select_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).mean_rows();
        let rg = self.rg(x);
        self.push(out, Op::MeanRows(x), rg)
    }

    /// Column-wise max over rows; the gradient flows to the arg-max entry.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let (out, arg) = self.value(x).max_rows();
        let rg = self.rg(x);
        self.push(out, Op::MaxRows { x, arg }, rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm);
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// `−log softmax(logits)[label]` for a `1 × N` row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        check(lv.rows() == 1 && label < lv.cols(), "cross_entropy", || {
            format!("label {label} for logits {:?}", lv.shape())
        })?;
        let lse = super::tensor::log_sum_exp(lv.data());
        let loss = lse - lv.data()[label];
        let probs = lv.softmax_rows();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::full(1, 1, loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::full(1, 1, s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape != [1, 1] {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {out_shape:?}"),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRowBroadcast(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k)),
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * super::gelu_grad_scalar(x));
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let p = xhat.cols();
                if self.rg(*scale) || self.rg(*shift) {
                    let mut gs = Tensor::zeros(1, p);
                    let mut gh = Tensor::zeros(1, p);
                    for r in 0..g.rows() {
                        for c in 0..p {
                            gs.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            gh.data_mut()[c] += g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *scale, gs);
                    self.accumulate(grads, *shift, gh);
                }
                if self.rg(*x) {
                    let sv = self.value(*scale).data();
                    let mut gx = Tensor::zeros(g.rows(), p);
                    for r in 0..g.rows() {
                        let gh: Vec<f64> = (0..p).map(|c| g.get(r, c) * sv[c]).collect();
                        let xr = xhat.row(r);
                        let mean_g = gh.iter().sum::<f64>() / p as f64;
                        let mean_gx =
                            gh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / p as f64;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (gh[c] - mean_g - xr[c] * mean_gx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::SliceCols { x, start } => {
                let [rows, cols] = self.shape(*x);
                let mut gx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, g.slice_cols(start, w));
                    start += w;
                }
            }
            Op::SelectRows { x, idx } => {
                let [rows, cols] = self.shape(*x);
                let mut gx = Tensor::zeros(rows, cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let [rows, cols] = self.shape(*x);
                let inv = 1.0 / rows as f64;
                let gx = Tensor::from_fn(rows, cols, |_, c| g.data()[c] * inv);
                self.accumulate(grads, *x, gx);
            }
            Op::MaxRows { x, arg } => {
                let [rows, cols] = self.shape(*x);
                let mut gx = Tensor::zeros(rows, cols);
                for (c, &r) in arg.iter().enumerate() {
                    gx.set(r, c, g.data()[c]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut gx = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = (gv - yv * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let s = g.data()[0];
                let mut gl = probs.scale(s);
                gl.data_mut()[*label] -= s;
                self.accumulate(grads, *logits, gl);
            }
            Op::Sum(x) => {
                let [rows, cols] = self.shape(*x);
                self.accumulate(grads, *x, Tensor::full(rows, cols, g.data()[0]));
            }
        }
    }
}
