//! Reverse-mode differentiation over 2-D tensors.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{axpy, gemm, matmul_t, Tensor};
use crate::error::{Error, Result};

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

enum Op {
    Constant,
    Param { store: usize, id: ParamId },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SumCols(Var),
    SumAll(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Minimum(Var, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    LogSoftmax(Var),
    Elementwise { x: Var, df: ScalarFn },
}

struct Node {
    op: Op,
    /// Empty for parameter leaves, whose values live in their store.
    value: Tensor,
    requires_grad: bool,
}

/// Records operations for one forward pass. Parameter values are read from
/// the borrowed stores, never copied.
pub struct Tape<'a> {
    stores: Vec<&'a ParamStore>,
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed like the tape's stores.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub per_store: Vec<Vec<Option<Tensor>>>,
}

impl Gradients {
    pub fn get(&self, store: usize, id: ParamId) -> Option<&Tensor> {
        self.per_store.get(store).and_then(|g| g[id.0].as_ref())
    }

    /// True when no gradient at all reached store `store`.
    pub fn untouched(&self, store: usize) -> bool {
        self.per_store[store].iter().all(|g| g.is_none())
    }

    /// Adds the gradients of store index `store` into `target.grad`.
    pub fn accumulate(&self, store: usize, target: &mut ParamStore) {
        for (p, g) in target.params.iter_mut().zip(&self.per_store[store]) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<'a> Tape<'a> {
    pub fn new(stores: &[&'a ParamStore]) -> Self {
        Tape { stores: stores.to_vec(), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn store(&self, index: usize) -> &'a ParamStore {
        self.stores[index]
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param { store, id } => self.stores[store].value(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    pub fn param(&mut self, store: usize, id: ParamId) -> Var {
        self.push(Op::Param { store, id }, Tensor::zeros(0, 0), true)
    }

    /// `x W^T + b` for `x` (B, in), `W` (out, in), `b` (1, out).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut y = matmul_t(self.value(x), self.value(w))?;
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.rows != 1 || bias.cols != y.cols {
                return Err(shape_err("bias", bias.shape(), (1, y.cols)));
            }
            for r in 0..y.rows {
                for (o, bo) in y.row_mut(r).iter_mut().zip(&bias.data) {
                    *o += bo;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Op::Linear { x, w, b }, y, rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(what, va.shape(), vb.shape()));
        }
        let y = va.zip_map(vb, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, y, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(op, y, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Applies `f` elementwise with a caller-supplied derivative `df`.
    pub fn elementwise(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Var {
        self.unary(x, f, Op::Elementwise { x, df: Arc::new(df) })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.cols {
            return Err(Error::Shape(format!("columns {start}..{} of width {}", start + len, v.cols)));
        }
        let mut y = Tensor::zeros(v.rows, len);
        for r in 0..v.rows {
            y.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start }, y, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows);
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows != rows {
                return Err(shape_err("concat", v.shape(), (rows, v.cols)));
            }
            cols += v.cols;
        }
        let mut y = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let v = self.value(*p);
                y.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
                off += v.cols;
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), y, rg))
    }

    /// Row sums: (B, n) -> (B, 1).
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = (0..v.rows).map(|r| v.row(r).iter().sum()).collect();
        let y = Tensor { rows: v.rows, cols: 1, data };
        let rg = self.rg(x);
        self.push(Op::SumCols(x), y, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::SumAll(x), y, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Repeats a (1, n) row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rows != 1 {
            return Err(shape_err("broadcast_rows", v.shape(), (1, v.cols)));
        }
        let mut data = Vec::with_capacity(rows * v.cols);
        for _ in 0..rows {
            data.extend_from_slice(&v.data);
        }
        let y = Tensor { rows, cols: v.cols, data };
        let rg = self.rg(x);
        Ok(self.push(Op::BroadcastRows(x), y, rg))
    }

    /// Repeats a (B, 1) column `cols` times.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let v = self.value(x);
        if v.cols != 1 {
            return Err(shape_err("broadcast_cols", v.shape(), (v.rows, 1)));
        }
        let data = v.data.iter().flat_map(|&c| std::iter::repeat_n(c, cols)).collect();
        let y = Tensor { rows: v.rows, cols, data };
        let rg = self.rg(x);
        Ok(self.push(Op::BroadcastCols(x), y, rg))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut y = v.clone();
        for r in 0..y.rows {
            let row = y.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|z| *z -= lse);
        }
        let rg = self.rg(x);
        self.push(Op::LogSoftmax(x), y, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let l = self.log_softmax(x);
        self.exp(l)
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients {
            per_store: self.stores.iter().map(|s| vec![None; s.len()]).collect(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param { store, id } => match &mut out.per_store[*store][id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(xv.rows, xv.cols);
                        gemm(g.rows, g.cols, wv.cols, &g.data, (g.cols, 1), &wv.data, (wv.cols, 1), &mut dx.data, (wv.cols, 1));
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let mut dw = Tensor::zeros(wv.rows, wv.cols);
                        gemm(g.cols, g.rows, xv.cols, &g.data, (1, g.cols), &xv.data, (xv.cols, 1), &mut dw.data, (xv.cols, 1));
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let mut db = Tensor::zeros(1, g.cols);
                            for r in 0..g.rows {
                                axpy(&mut db.data, 1.0, g.row(r));
                            }
                            accumulate(&mut grads, *b, db);
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.pass(&mut grads, *b, || g.clone());
                    self.pass(&mut grads, *a, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.pass(&mut grads, *b, || g.map(|v| -v));
                    self.pass(&mut grads, *a, || g.clone());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.pass(&mut grads, *a, || g.zip_map(vb, |g, b| g * b));
                    self.pass(&mut grads, *b, || g.zip_map(va, |g, a| g * a));
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mask_a = va.zip_map(vb, |x, y| if x <= y { 1.0 } else { 0.0 });
                    self.pass(&mut grads, *a, || g.zip_map(&mask_a, |g, m| g * m));
                    self.pass(&mut grads, *b, || g.zip_map(&mask_a, |g, m| g * (1.0 - m)));
                }
                Op::Scale(x, c) => self.pass(&mut grads, *x, || g.map(|v| v * c)),
                Op::Offset(x) => self.pass(&mut grads, *x, || g.clone()),
                Op::Sigmoid(x) => self.pass(&mut grads, *x, || g.zip_map(y, |g, s| g * s * (1.0 - s))),
                Op::Tanh(x) => self.pass(&mut grads, *x, || g.zip_map(y, |g, t| g * (1.0 - t * t))),
                Op::Exp(x) => self.pass(&mut grads, *x, || g.zip_map(y, |g, e| g * e)),
                Op::Log(x) => {
                    let xv = self.value(*x);
                    self.pass(&mut grads, *x, || g.zip_map(xv, |g, v| g / v))
                }
                Op::LogSigmoid(x) => {
                    let xv = self.value(*x);
                    self.pass(&mut grads, *x, || g.zip_map(xv, |g, v| g * sigmoid(-v)))
                }
                Op::Sin(x) => {
                    let xv = self.value(*x);
                    self.pass(&mut grads, *x, || g.zip_map(xv, |g, v| g * v.cos()))
                }
                Op::Cos(x) => {
                    let xv = self.value(*x);
                    self.pass(&mut grads, *x, || g.zip_map(xv, |g, v| -g * v.sin()))
                }
                Op::Square(x) => {
                    let xv = self.value(*x);
                    self.pass(&mut grads, *x, || g.zip_map(xv, |g, v| 2.0 * g * v))
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.value(*x);
                    self.pass(&mut grads, *x, || g.zip_map(xv, |g, v| if v > *lo && v < *hi { g } else { 0.0 }))
                }
                Op::Elementwise { x, df } => {
                    let xv = self.value(*x);
                    self.pass(&mut grads, *x, || g.zip_map(xv, |g, v| g * df(v)))
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    self.pass(&mut grads, *x, || {
                        let mut dx = Tensor::zeros(xv.rows, xv.cols);
                        for r in 0..g.rows {
                            dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                        }
                        dx
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.value(*p).cols;
                        self.pass(&mut grads, *p, || {
                            let mut dp = Tensor::zeros(g.rows, cols);
                            for r in 0..g.rows {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                            }
                            dp
                        });
                        off += cols;
                    }
                }
                Op::SumCols(x) => {
                    let cols = self.value(*x).cols;
                    self.pass(&mut grads, *x, || {
                        let data = g.data.iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
                        Tensor { rows: g.rows, cols, data }
                    });
                }
                Op::SumAll(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    self.pass(&mut grads, *x, || Tensor::filled(rows, cols, g.item()));
                }
                Op::BroadcastRows(x) => self.pass(&mut grads, *x, || {
                    let mut d = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        axpy(&mut d.data, 1.0, g.row(r));
                    }
                    d
                }),
                Op::BroadcastCols(x) => self.pass(&mut grads, *x, || {
                    let data = (0..g.rows).map(|r| g.row(r).iter().sum()).collect();
                    Tensor { rows: g.rows, cols: 1, data }
                }),
                Op::LogSoftmax(x) => self.pass(&mut grads, *x, || {
                    let mut d = g.clone();
                    for r in 0..g.rows {
                        let gs: f64 = g.row(r).iter().sum();
                        for (di, li) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                            *di -= li.exp() * gs;
                        }
                    }
                    d
                }),
            }
        }
        Ok(out)
    }

    fn pass(&self, grads: &mut [Option<Tensor>], to: Var, make: impl FnOnce() -> Tensor) {
        if self.rg(to) {
            accumulate(grads, to, make());
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}
