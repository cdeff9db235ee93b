//! Reverse-mode differentiation over a per-pass operation tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, which is already a topological order of the graph.
//! [`Tape::backward`] walks the nodes once in reverse. Tapes use interior
//! mutability and are confined to one thread; independent tapes may run on
//! different threads.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use super::tensor::{matmul_nt, matmul_tn, Tensor};
use super::Param;
use crate::error::{dim_err, param_err, Error, Result};

/// Operations counted at 5 flops per element.
pub const ELEMENTWISE_NORM_FLOPS: u64 = 5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Gelu(usize),
    Softplus(usize),
    Sum(usize),
    SumRows(usize),
    Softmax { x: usize, axis: usize, temperature: f64 },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Transpose(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherRows(Vec<(usize, usize)>),
    NormalizeRows { x: usize, norms: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

/// Operation recorder for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
    flops: Cell<u64>,
    expert_calls: Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating-point operations executed so far (2 per multiply-accumulate,
    /// 5 per softmax or layer-norm element, other elementwise work uncounted).
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn expert_calls(&self) -> u64 {
        self.expert_calls.get()
    }

    pub(crate) fn note_expert_call(&self) {
        self.expert_calls.set(self.expert_calls.get() + 1);
    }

    fn add_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    /// Binds a named trainable parameter. Binding the same name twice returns
    /// the same node, so shared parameters accumulate gradient from every use.
    pub fn param(&self, p: &Param) -> Var<'_> {
        if let Some(&id) = self.inner.borrow().params.get(&p.name) {
            return Var { tape: self, id };
        }
        let v = self.push(p.value.clone(), Op::Leaf, true);
        self.inner.borrow_mut().params.insert(p.name.clone(), v.id);
        v
    }

    /// A differentiable input that is not a named parameter.
    pub fn variable(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: inner.nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[id].value)
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let inner = self.inner.borrow();
        if inner.nodes[output.id].value.numel() != 1 {
            return Err(dim_err!(
                "backward needs a scalar output, got shape {:?}",
                inner.nodes[output.id].value.shape()
            ));
        }
        let n = output.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[output.id] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            backprop(&inner.nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, params: inner.params.clone() })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            accumulate(grads, nodes, *a, |d| add_into(d, &matmul_nt(g, bv.data(), m, n, k)));
            accumulate(grads, nodes, *b, |d| add_into(d, &matmul_tn(av.data(), g, m, k, n)));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g));
            accumulate(grads, nodes, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g));
            accumulate(grads, nodes, *b, |d| {
                for (x, gv) in d.iter_mut().zip(g) {
                    *x -= gv;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        Op::AddRow(a, bias) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g));
            let n = nodes[*bias].value.numel();
            accumulate(grads, nodes, *bias, |d| {
                for row in g.chunks(n) {
                    add_into(d, row);
                }
            });
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, |d| {
            for (x, gv) in d.iter_mut().zip(g) {
                *x += c * gv;
            }
        }),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, |d| add_into(d, g)),
        Op::Exp(a) => accumulate(grads, nodes, *a, |d| {
            for ((x, gv), y) in d.iter_mut().zip(g).zip(out.data()) {
                *x += gv * y;
            }
        }),
        Op::Ln(a) => {
            let av = nodes[*a].value.data();
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / av[i];
                }
            })
        }
        Op::Gelu(a) => {
            let av = nodes[*a].value.data();
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * gelu_grad(av[i]);
                }
            })
        }
        Op::Softplus(a) => {
            let av = nodes[*a].value.data();
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * sigmoid(av[i]);
                }
            })
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, |d| {
            for x in d.iter_mut() {
                *x += g[0];
            }
        }),
        Op::SumRows(a) => {
            let n = *nodes[*a].value.shape().last().unwrap();
            accumulate(grads, nodes, *a, |d| {
                for (r, row) in d.chunks_mut(n).enumerate() {
                    for x in row {
                        *x += g[r];
                    }
                }
            })
        }
        Op::Softmax { x, axis, temperature } => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let y = out.data();
            accumulate(grads, nodes, *x, |d| {
                if *axis == 1 {
                    for r in 0..m {
                        let s = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            d[r * n + c] += s[c] * (gr[c] - dot) / temperature;
                        }
                    }
                } else {
                    for c in 0..n {
                        let dot: f64 = (0..m).map(|r| y[r * n + c] * g[r * n + c]).sum();
                        for r in 0..m {
                            let i = r * n + c;
                            d[i] += y[i] * (g[i] - dot) / temperature;
                        }
                    }
                }
            })
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let n = nodes[*gain].value.numel();
            let gv = nodes[*gain].value.data();
            accumulate(grads, nodes, *gain, |d| {
                for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for c in 0..n {
                        d[c] += gr[c] * xr[c];
                    }
                }
            });
            accumulate(grads, nodes, *bias, |d| {
                for gr in g.chunks(n) {
                    add_into(d, gr);
                }
            });
            accumulate(grads, nodes, *x, |d| {
                for (r, (gr, xr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        d[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            accumulate(grads, nodes, *a, |d| {
                // out is [m×n], input was [n×m]
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] += g[i * n + j];
                    }
                }
            })
        }
        Op::SliceCols { x, start } => {
            let (m, w) = (out.shape()[0], out.shape()[1]);
            let n = nodes[*x].value.shape()[1];
            accumulate(grads, nodes, *x, |d| {
                for r in 0..m {
                    add_into(&mut d[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                }
            })
        }
        Op::ConcatCols(parts) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.shape()[1];
                accumulate(grads, nodes, p, |d| {
                    for r in 0..m {
                        add_into(&mut d[r * w..(r + 1) * w], &g[r * n + offset..r * n + offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::GatherRows(sources) => {
            let n = out.shape()[1];
            for (i, &(src, row)) in sources.iter().enumerate() {
                accumulate(grads, nodes, src, |d| add_into(&mut d[row * n..(row + 1) * n], &g[i * n..(i + 1) * n]));
            }
        }
        Op::NormalizeRows { x, norms } => {
            let n = out.shape()[1];
            let y = out.data();
            accumulate(grads, nodes, *x, |d| {
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        d[r * n + c] += (gr[c] - yr[c] * dot) / norm;
                    }
                }
            })
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Softmax of a row-major `[m×n]` buffer along `axis` at `temperature`.
pub fn softmax_raw(x: &[f64], m: usize, n: usize, axis: usize, temperature: f64) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    let (outer, inner, stride_o, stride_i) = if axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
    for o in 0..outer {
        let idx = |i: usize| o * stride_o + i * stride_i;
        let max = (0..inner).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..inner {
            let e = ((x[idx(i)] - max) / temperature).exp();
            y[idx(i)] = e;
            total += e;
        }
        for i in 0..inner {
            y[idx(i)] /= total;
        }
    }
    y
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, Tensor::item)
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        self.tape.with_value(self.id, Tensor::dims2)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let t = self
            .tape
            .with_value(self.id, |v| Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect()).unwrap());
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(t, op, rg)
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(dim_err!("{what}: shapes differ: {:?} vs {:?}", a, b));
        }
        Ok(())
    }

    fn binary(&self, other: &Var<'t>, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_shape(other, what)?;
        let t = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape(), data)?
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(t, op, rg))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let t = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id].value.matmul(&inner.nodes[other.id].value)?
        };
        let (m, k) = self.dims2()?;
        let n = t.shape()[1];
        self.tape.add_flops(2 * (m * k * n) as u64);
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(t, Op::MatMul(self.id, other.id), rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (m, n) = self.dims2()?;
        let t = {
            let inner = self.tape.inner.borrow();
            let b = &inner.nodes[bias.id].value;
            if b.numel() != n {
                return Err(dim_err!("add_row: bias {:?} vs matrix {:?}", b.shape(), [m, n]));
            }
            let a = inner.nodes[self.id].value.data();
            let data = (0..m * n).map(|i| a[i] + b.data()[i % n]).collect();
            Tensor::new(&[m, n], data)?
        };
        let rg = self.tape.needs(&[self.id, bias.id]);
        Ok(self.tape.push(t, Op::AddRow(self.id, bias.id), rg))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.tape.with_value(self.id, Tensor::sum);
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.tape.with_value(self.id, Tensor::numel);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums along the last axis of a matrix, giving a length-`m` vector.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let (m, n) = self.dims2()?;
        let data = self.tape.with_value(self.id, |v| v.data().chunks(n).map(|r| r.iter().sum()).collect::<Vec<f64>>());
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(Tensor::new(&[m], data)?, Op::SumRows(self.id), rg))
    }

    /// `softmax(x / temperature)` along `axis` (0 = down columns, 1 = across rows).
    pub fn softmax(&self, axis: usize, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(param_err!("softmax temperature must be positive, got {temperature}"));
        }
        if axis > 1 {
            return Err(dim_err!("softmax axis {axis} on a matrix"));
        }
        let (m, n) = self.dims2()?;
        let y = self.tape.with_value(self.id, |v| softmax_raw(v.data(), m, n, axis, temperature));
        self.tape.add_flops(ELEMENTWISE_NORM_FLOPS * (m * n) as u64);
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(Tensor::new(&[m, n], y)?, Op::Softmax { x: self.id, axis, temperature }, rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        if !(eps > 0.0) {
            return Err(param_err!("layer-norm eps must be positive, got {eps}"));
        }
        let (m, n) = self.dims2()?;
        let (gn, bn) = (gain.tape.with_value(gain.id, Tensor::numel), bias.tape.with_value(bias.id, Tensor::numel));
        if gn != n || bn != n {
            return Err(dim_err!("layer_norm: gain/bias length {gn}/{bn} vs row width {n}"));
        }
        let (y, xhat, rstd) = {
            let inner = self.tape.inner.borrow();
            let x = inner.nodes[self.id].value.data();
            let g = inner.nodes[gain.id].value.data();
            let b = inner.nodes[bias.id].value.data();
            let mut xhat = vec![0.0; m * n];
            let mut rstd = vec![0.0; m];
            let mut y = vec![0.0; m * n];
            for r in 0..m {
                let row = &x[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..n {
                    let h = (row[c] - mean) * rs;
                    xhat[r * n + c] = h;
                    y[r * n + c] = h * g[c] + b[c];
                }
            }
            (y, xhat, rstd)
        };
        self.tape.add_flops(ELEMENTWISE_NORM_FLOPS * (m * n) as u64);
        let rg = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            Tensor::new(&[m, n], y)?,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd },
            rg,
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let t = self.tape.with_value(self.id, Tensor::transpose)?;
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(t, Op::Transpose(self.id), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (m, n) = self.dims2()?;
        if start >= end || end > n {
            return Err(dim_err!("column slice {start}..{end} of shape {:?}", [m, n]));
        }
        let data = self.tape.with_value(self.id, |v| {
            v.data().chunks(n).flat_map(|r| r[start..end].iter().copied()).collect::<Vec<_>>()
        });
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(Tensor::new(&[m, end - start], data)?, Op::SliceCols { x: self.id, start }, rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts.first().ok_or_else(|| dim_err!("concat_cols of nothing"))?.tape;
        let inner = tape.inner.borrow();
        let m = inner.nodes[parts[0].id].value.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = inner.nodes[p.id].value.dims2()?;
            if r != m {
                return Err(dim_err!("concat_cols: row counts {m} and {r} differ"));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&inner.nodes[p.id].value.data()[r * w..(r + 1) * w]);
            }
        }
        drop(inner);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.needs(&ids);
        Ok(tape.push(Tensor::new(&[m, n], data)?, Op::ConcatCols(ids), rg))
    }

    /// Builds a matrix whose `i`-th row is row `sources[i].1` of `sources[i].0`.
    pub fn gather_rows(sources: &[(Var<'t>, usize)]) -> Result<Var<'t>> {
        let tape = sources.first().ok_or_else(|| dim_err!("gather_rows of nothing"))?.0.tape;
        let inner = tape.inner.borrow();
        let n = inner.nodes[sources[0].0.id].value.dims2()?.1;
        let mut data = Vec::with_capacity(sources.len() * n);
        for (v, row) in sources {
            let t = &inner.nodes[v.id].value;
            let (m, c) = t.dims2()?;
            if c != n || *row >= m {
                return Err(dim_err!("gather_rows: row {row} of shape {:?} into width {n}", t.shape()));
            }
            data.extend_from_slice(t.row(*row));
        }
        drop(inner);
        let ids: Vec<usize> = sources.iter().map(|(v, _)| v.id).collect();
        let rg = tape.needs(&ids);
        let op = Op::GatherRows(sources.iter().map(|(v, r)| (v.id, *r)).collect());
        Ok(tape.push(Tensor::new(&[sources.len(), n], data)?, op, rg))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let src: Vec<_> = rows.iter().map(|&r| (*self, r)).collect();
        Var::gather_rows(&src)
    }

    /// Scales each row to unit Euclidean norm. Zero rows are an error.
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        let (m, n) = self.dims2()?;
        let (y, norms) = self.tape.with_value(self.id, |v| {
            let mut y = v.data().to_vec();
            let mut norms = Vec::with_capacity(m);
            for row in y.chunks_mut(n) {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                norms.push(norm);
                if norm > 0.0 {
                    row.iter_mut().for_each(|x| *x /= norm);
                }
            }
            (y, norms)
        });
        if let Some(r) = norms.iter().position(|&x| !(x > 0.0)) {
            return Err(Error::Evaluation(format!("cannot normalize zero-norm row {r}")));
        }
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(Tensor::new(&[m, n], y)?, Op::NormalizeRows { x: self.id, norms }, rg))
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<String, usize>,
}

impl Gradients {
    /// Gradient with respect to a recorded value; zeros if it did not
    /// influence the output.
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        let shape = v.shape();
        match &self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => Tensor::new(&shape, g.to_vec()).unwrap(),
            None => Tensor::zeros(&shape),
        }
    }

    /// Raw gradient buffer of a bound parameter, `None` if it was never bound
    /// or received no gradient.
    pub fn param(&self, name: &str) -> Option<&[f64]> {
        let id = *self.params.get(name)?;
        self.grads[id].as_deref()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn numeric_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
            assert!(rel <= tol || (x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity_and_projector() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        assert_eq!(i2.matmul(&m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let p = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let v = tape.constant(t2(&[&[5.0], &[7.0]]));
        let out = p.matmul(&v).unwrap().value();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[5.0, 0.0]);
        assert_eq!(tape.flops(), 2 * 8 + 2 * 4);
    }

    #[test]
    fn matmul_sum_gradient_is_row_broadcast_of_column_sums() {
        let a0 = Tensor::from_fn(&[3, 3], |i| ((i * 7 + 3) as f64 * 0.31).sin());
        let b0 = Tensor::from_fn(&[3, 3], |i| ((i * 5 + 1) as f64 * 0.17).cos());
        let tape = Tape::new();
        let a = tape.variable(a0.clone());
        let b = tape.constant(b0.clone());
        let loss = a.matmul(&b).unwrap().sum();
        let ga = tape.backward(loss).unwrap().wrt(&a);
        let num = numeric_grad(&a0, 1e-5, |x| x.matmul(&b0).unwrap().sum());
        assert_close(ga.data(), &num, 1e-8);
        // d/da_ij sum(ab) = sum_k b_jk
        for i in 0..3 {
            for j in 0..3 {
                let rowsum: f64 = b0.row(j).iter().sum();
                assert!((ga.at2(i, j) - rowsum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 3], vec![0.0; 3]).unwrap());
        for v in x.softmax(1, 1.0).unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::new(&[1, 2], vec![2f64.ln(), 0.0]).unwrap());
        let y = x.softmax(1, 1.0).unwrap().value();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(x.softmax(1, 0.0).is_err());
        assert!(x.softmax(1, -1.0).is_err());
    }

    #[test]
    fn softmax_temperature_identity() {
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).sin() * 3.0).collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 4], data.clone()).unwrap());
        let x2 = tape.constant(Tensor::new(&[3, 4], data.iter().map(|v| 2.0 * v).collect()).unwrap());
        for axis in 0..2 {
            let a = x.softmax(axis, 0.5).unwrap().value();
            let b = x2.softmax(axis, 1.0).unwrap().value();
            assert!(a.max_abs_diff(&b) < 1e-15);
        }
    }

    #[test]
    fn softmax_gradients_both_axes() {
        let x0 = Tensor::from_fn(&[3, 4], |i| ((i * 3) as f64 * 0.7).sin());
        let w = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.9).cos());
        for axis in 0..2 {
            let tape = Tape::new();
            let x = tape.variable(x0.clone());
            let wv = tape.constant(w.clone());
            let loss = x.softmax(axis, 0.7).unwrap().mul(&wv).unwrap().sum();
            let g = tape.backward(loss).unwrap().wrt(&x);
            let num = numeric_grad(&x0, 1e-5, |t| {
                let y = softmax_raw(t.data(), 3, 4, axis, 0.7);
                y.iter().zip(w.data()).map(|(a, b)| a * b).sum()
            });
            assert_close(g.data(), &num, 1e-6);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::new(&[1, 3], vec![5.0; 3]).unwrap());
        assert_eq!(x.layer_norm(&g, &b, 1e-5).unwrap().value().data(), &[0.0; 3]);
        assert!(x.layer_norm(&g, &b, 0.0).is_err());

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let y = x.layer_norm(&g, &b, 1e-12).unwrap().value();
        let var = (y.data()[0].powi(2) + y.data()[1].powi(2)) / 2.0;
        assert!((var - 1.0).abs() < 1e-6);
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && (y.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradient() {
        let x0 = Tensor::from_fn(&[2, 4], |i| ((i * 5 + 2) as f64 * 0.61).sin());
        let g0 = Tensor::from_fn(&[4], |i| 1.0 + 0.1 * i as f64);
        let b0 = Tensor::from_fn(&[4], |i| 0.05 * i as f64);
        let w = Tensor::from_fn(&[2, 4], |i| (i as f64 * 1.1).cos());
        let eval = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .layer_norm(&tape.constant(g.clone()), &tape.constant(b.clone()), 1e-5)
                .unwrap();
            y.mul(&tape.constant(w.clone())).unwrap().sum().item()
        };
        let tape = Tape::new();
        let (x, g, b) = (tape.variable(x0.clone()), tape.variable(g0.clone()), tape.variable(b0.clone()));
        let loss = x.layer_norm(&g, &b, 1e-5).unwrap().mul(&tape.constant(w.clone())).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_close(grads.wrt(&x).data(), &numeric_grad(&x0, 1e-5, |t| eval(t, &g0, &b0)), 1e-5);
        assert_close(grads.wrt(&g).data(), &numeric_grad(&g0, 1e-5, |t| eval(&x0, t, &b0)), 1e-5);
        assert_close(grads.wrt(&b).data(), &numeric_grad(&b0, 1e-5, |t| eval(&x0, &g0, t)), 1e-5);
    }

    #[test]
    fn structural_ops_gradients() {
        let x0 = Tensor::from_fn(&[3, 4], |i| ((i * 3 + 1) as f64 * 0.43).sin() + 0.1);
        let w = Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.77).cos());
        let f = |tape: &Tape, x: Var<'_>| -> f64 {
            let _ = tape;
            let a = x.slice_cols(0, 2).unwrap();
            let b = x.slice_cols(2, 4).unwrap();
            let c = Var::concat_cols(&[b, a]).unwrap();
            let r = Var::gather_rows(&[(c, 2), (c, 0), (c, 2), (x, 1)]).unwrap();
            let n = r.normalize_rows().unwrap();
            let t = n.transpose().unwrap().gelu().softplus();
            t.mul(&x.tape().constant(w.clone())).unwrap().sum_rows().unwrap().exp().sum().item()
        };
        let tape = Tape::new();
        let x = tape.variable(x0.clone());
        let a = x.slice_cols(0, 2).unwrap();
        let b = x.slice_cols(2, 4).unwrap();
        let c = Var::concat_cols(&[b, a]).unwrap();
        let r = Var::gather_rows(&[(c, 2), (c, 0), (c, 2), (x, 1)]).unwrap();
        let n = r.normalize_rows().unwrap();
        let t = n.transpose().unwrap().gelu().softplus();
        let loss = t.mul(&tape.constant(w.clone())).unwrap().sum_rows().unwrap().exp().sum();
        assert!((loss.item() - f(&tape, tape.constant(x0.clone()))).abs() < 1e-12);
        let g = tape.backward(loss).unwrap().wrt(&x);
        let num = numeric_grad(&x0, 1e-5, |v| {
            let tp = Tape::new();
            f(&tp, tp.constant(v.clone()))
        });
        assert_close(g.data(), &num, 1e-6);
    }

    #[test]
    fn shared_param_accumulates() {
        let p = Param::new("w", Tensor::new(&[1, 1], vec![3.0]).unwrap());
        let tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a.id(), b.id());
        let loss = a.mul(&b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("w").unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }
}
