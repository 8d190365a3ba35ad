use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stabilizer added to the row variance inside layer normalization.
pub const LN_EPS: f64 = 1e-10;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    RepeatRows(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape over a borrowed [`ParamStore`].
///
/// Every operation evaluates eagerly and records what backward needs.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients indexed like the store.
    pub fn into_param_grads(self) -> Vec<Option<Tensor>> {
        self.params
    }

    pub fn param_grads(&self) -> &[Option<Tensor>] {
        &self.params
    }
}

fn check_same(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape(
            name,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = self.push(value, Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = ta.matmul_ex(tb, false, false);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape()),
            ));
        }
        let out = ta.matmul_ex(tb, false, true);
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = Tensor::zeros(&[ta.rows(), ta.cols()]);
        for r in 0..ta.rows() {
            for ((o, x), y) in out.row_mut(r).iter_mut().zip(ta.row(r)).zip(tb.data()) {
                *o = x + y;
            }
        }
        Ok(self.push(out, Op::AddBias(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1×n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != n || tb.len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let rows = tx.rows();
        let mut xhat = Tensor::zeros(&[rows, n]);
        let mut out = Tensor::zeros(&[rows, n]);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * tg.data()[c] + tb.data()[c]);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax across each row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(&[ta.rows(), ta.cols()]);
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut s = 0.0;
            for (oc, &x) in o.iter_mut().zip(row) {
                *oc = (x - m).exp();
                s += *oc;
            }
            for oc in o.iter_mut() {
                *oc /= s;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {} vs {}", rows, self.value(p).rows()),
                ));
            }
            cols += self.value(p).cols();
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts differ: {} vs {}", cols, t.cols()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) out of {} columns", start + len, ta.cols()),
            ));
        }
        let mut out = Tensor::zeros(&[ta.rows(), len]);
        for r in 0..ta.rows() {
            out.row_mut(r).copy_from_slice(&ta.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("[{start}, {}) out of {} rows", start + len, ta.rows()),
            ));
        }
        let c = ta.cols();
        let out = Tensor::matrix(len, c, ta.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Stacks a single row `m` times.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() != 1 {
            return Err(Error::shape(
                "repeat_rows",
                format!("expected one row, got {:?}", ta.shape()),
            ));
        }
        let mut data = Vec::with_capacity(m * ta.cols());
        for _ in 0..m {
            data.extend_from_slice(ta.data());
        }
        let out = Tensor::matrix(m, ta.cols(), data)?;
        Ok(self.push(out, Op::RepeatRows(a)))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(&[1, ta.cols()]);
        for r in 0..ta.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / ta.rows() as f64);
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    /// Mean of `(a - b)²` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.mean(s))
    }

    /// `x·W + b` for a weight `in×out` and bias `1×out`.
    pub fn dense(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = self.param(w);
        let bv = self.param(b);
        let h = self.matmul(x, wv)?;
        self.add_bias(h, bv)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called for a node that was never computed".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(lo, *a, g.matmul_ex(tb, false, true));
                    acc(lo, *b, ta.matmul_ex(&g, true, false));
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(lo, *a, g.matmul_ex(tb, false, false));
                    acc(lo, *b, g.matmul_ex(ta, true, false));
                }
                Op::AddBias(a, b) => {
                    let mut gb = Tensor::zeros(self.value(*b).shape());
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(lo, *b, gb);
                    acc(lo, *a, g.clone());
                }
                Op::Add(a, b) => {
                    acc(lo, *a, g.clone());
                    acc(lo, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(lo, *b, g.map(|x| -x));
                    acc(lo, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(lo, *a, ga);
                    acc(lo, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(lo, *a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => acc(lo, *a, g.clone()),
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| x * gelu_grad(y));
                    acc(lo, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    acc(lo, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y);
                    acc(lo, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| 2.0 * x * y);
                    acc(lo, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let n = xhat.cols();
                    let tg = self.value(*gamma);
                    let mut gg = Tensor::zeros(tg.shape());
                    let mut gbeta = Tensor::zeros(tg.shape());
                    let mut gx = Tensor::zeros(&[xhat.rows(), n]);
                    for r in 0..xhat.rows() {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut sum_gh = 0.0;
                        let mut sum_gh_h = 0.0;
                        for c in 0..n {
                            gg.data_mut()[c] += gr[c] * hr[c];
                            gbeta.data_mut()[c] += gr[c];
                            let gh = gr[c] * tg.data()[c];
                            sum_gh += gh;
                            sum_gh_h += gh * hr[c];
                        }
                        let inv = inv_std[r];
                        let nf = n as f64;
                        let out = gx.row_mut(r);
                        for c in 0..n {
                            let gh = gr[c] * tg.data()[c];
                            out[c] = inv / nf * (nf * gh - sum_gh - hr[c] * sum_gh_h);
                        }
                    }
                    acc(lo, *gamma, gg);
                    acc(lo, *beta, gbeta);
                    acc(lo, *x, gx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(lo, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut gp = Tensor::zeros(&[g.rows(), c]);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        off += c;
                        acc(lo, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        let gp = Tensor::new(
                            self.value(p).shape().to_vec(),
                            g.data()[off * cols..(off + r) * cols].to_vec(),
                        )?;
                        off += r;
                        acc(lo, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let ta = self.value(*a);
                    let mut ga = Tensor::zeros(ta.shape());
                    let c = g.cols();
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..start + c].copy_from_slice(g.row(r));
                    }
                    acc(lo, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let ta = self.value(*a);
                    let mut ga = Tensor::zeros(ta.shape());
                    let c = ta.cols();
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(lo, *a, ga);
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.value(*a).shape())?;
                    acc(lo, *a, ga);
                }
                Op::RepeatRows(a) => {
                    let mut ga = Tensor::zeros(self.value(*a).shape());
                    for r in 0..g.rows() {
                        for (o, x) in ga.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(lo, *a, ga);
                }
                Op::MeanRows(a) => {
                    let ta = self.value(*a);
                    let m = ta.rows();
                    let mut ga = Tensor::zeros(ta.shape());
                    for r in 0..m {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *o = x / m as f64;
                        }
                    }
                    acc(lo, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Tensor::filled(self.value(*a).shape(), g.item());
                    acc(lo, *a, ga);
                }
                Op::Mean(a) => {
                    let ta = self.value(*a);
                    let ga = Tensor::filled(ta.shape(), g.item() / ta.len() as f64);
                    acc(lo, *a, ga);
                }
            }
        }

        let mut params = vec![None; self.params.len()];
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads.get(v.0).and_then(Option::as_ref) {
                params[id.0] = Some(g.clone());
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}
