//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! holding its value and the recipe for its backward rule; nodes are only ever
//! appended, so node order is a topological order and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! Gradients accumulate (`+=`). Leaf gradients persist across repeated
//! `backward` calls until [`Tape::zero_grads`] is called; interior gradients are
//! recomputed on every call.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruption, used as a negative control by the
/// gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    SigmoidBackward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointwiseKind {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Negate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    SquaredL2Norm,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, PointwiseKind),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    StackRows(Vec<Var>),
    Reshape(Var),
    EmbedColumns {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Reduce(Var, ReduceKind),
    SumAxis {
        x: Var,
        axis: usize,
    },
    ClampMin {
        x: Var,
        floor: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LeafKind {
    Constant,
    Input,
    Param(ParamId),
}

/// Dynamic computation tape.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    leaves: Vec<Option<LeafKind>>,
    param_vars: Vec<Option<Var>>,
    fault: Option<Fault>,
    inference: bool,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Dimension {
            op,
            left: other.to_vec(),
            right: vec![0, 0],
        }),
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, where `op(a)` is `m x k` and `op(b)` is
/// `k x n`, all row-major. A transposed operand is stored in its untransposed
/// layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index the kernel touches lies
    // within the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::default()
        }
    }

    /// A tape on which parameters enter as constants, so nothing is
    /// differentiable unless created through [`Tape::input`].
    pub fn inference() -> Self {
        Tape {
            inference: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        self.leaves.push(None);
        Var(self.values.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor, kind: LeafKind) -> Var {
        let rg = !matches!(kind, LeafKind::Constant);
        let v = self.push(value, Op::Leaf, rg);
        self.leaves[v.0] = Some(kind);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, LeafKind::Constant)
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, LeafKind::Input)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let kind = if self.inference {
            LeafKind::Constant
        } else {
            LeafKind::Param(id)
        };
        let v = self.push_leaf(store.value(id).clone(), kind);
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Leaf for a stored parameter that is treated as a constant.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad[v.0])
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        if tb.is_scalar() {
            let s = tb.item();
            let data = ta.data().iter().map(|x| f(*x, s)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        if ta.is_scalar() {
            let s = ta.item();
            let data = tb.data().iter().map(|y| f(s, *y)).collect();
            return Tensor::new(tb.shape().to_vec(), data);
        }
        Err(dim_err(op, ta, tb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect())
            .expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + offset).collect())
            .expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn unary(&mut self, a: Var, kind: PointwiseKind) -> Result<Var> {
        let t = &self.values[a.0];
        let data: Vec<f64> = match kind {
            PointwiseKind::Sigmoid => t.data().iter().map(|&x| sigmoid(x)).collect(),
            PointwiseKind::Tanh => t.data().iter().map(|x| x.tanh()).collect(),
            PointwiseKind::Negate => t.data().iter().map(|x| -x).collect(),
            PointwiseKind::Exp => {
                let d: Vec<f64> = t.data().iter().map(|x| x.exp()).collect();
                if let Some(pos) = d.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Domain {
                        op: "exp",
                        detail: format!("exp({}) overflows", t.data()[pos]),
                    });
                }
                d
            }
            PointwiseKind::Log => {
                if let Some(x) = t.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("log requires positive input, got {x}"),
                    });
                }
                t.data().iter().map(|x| x.ln()).collect()
            }
        };
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Unary(a, kind), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, PointwiseKind::Sigmoid).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, PointwiseKind::Tanh).expect("tanh is total")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, PointwiseKind::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, PointwiseKind::Log)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, PointwiseKind::Negate).expect("negation is total")
    }

    /// `a [m x k] . b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = require_2d("matmul", ta)?;
        let (k2, n) = require_2d("matmul", tb)?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched affine map `x [B x in] . w^T + b`, with `w [out x in]`, `b [out]`.
    /// Each row of `x` is one input vector.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
        let (rows, inp) = require_2d("linear", tx)?;
        let (outp, inp2) = require_2d("linear", tw)?;
        if inp != inp2 {
            return Err(dim_err("linear", tx, tw));
        }
        let mut out = vec![0.0; rows * outp];
        let mut beta = 0.0;
        if let Some(b) = b {
            let tb = &self.values[b.0];
            if tb.numel() != outp {
                return Err(dim_err("linear", tw, tb));
            }
            for r in 0..rows {
                out[r * outp..(r + 1) * outp].copy_from_slice(tb.data());
            }
            beta = 1.0;
        }
        gemm(rows, inp, outp, 1.0, tx.data(), false, tw.data(), true, beta, &mut out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(vec![rows, outp], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = require_2d("concat_cols", &self.values[parts[0].0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = require_2d("concat_cols", &self.values[p.0])?;
            if r != rows {
                return Err(dim_err("concat_cols", &self.values[parts[0].0], &self.values[p.0]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.values[p.0].data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.values[x.0];
        let (rows, cols) = require_2d("slice_cols", t)?;
        if start + len > cols || len == 0 {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                size: cols,
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = require_2d("stack_rows", &self.values[parts[0].0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let t = &self.values[p.0];
            let (r, c) = require_2d("stack_rows", t)?;
            if c != cols {
                return Err(dim_err("stack_rows", &self.values[parts[0].0], t));
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::StackRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[x.0].reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Looks up columns of a `w x V` embedding table; row `r` of the `[ids.len() x w]`
    /// result is column `ids[r]`.
    pub fn embed_columns(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.values[table.0];
        let (w, vocab) = require_2d("embed_columns", t)?;
        let mut out = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    op: "embed_columns",
                    index: id,
                    size: vocab,
                });
            }
            out.extend((0..w).map(|i| t.data()[i * vocab + id]));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), w], out)?,
            Op::EmbedColumns {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise weighted negative log-softmax: `out[i] = weights[i] * (lse(logits_i) - logits_i[targets[i]])`.
    ///
    /// Uses max-shifted log-sum-exp. Rows with zero weight are skipped, so their
    /// targets are never read (padding).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = &self.values[logits.0];
        let (rows, vocab) = require_2d("cross_entropy", t)?;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: vec![rows, vocab],
                right: vec![targets.len(), weights.len()],
            });
        }
        let mut out = vec![0.0; rows];
        let mut probs = vec![0.0; rows * vocab];
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let target = targets[r];
            if target >= vocab {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: target,
                    size: vocab,
                });
            }
            let row = &t.data()[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut total = 0.0;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                total += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= total);
            let lse = max + total.ln();
            out[r] = weights[r] * (lse - row[target]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new(vec![rows], out)?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `-log softmax(logits)[target]` for a single logit vector, as a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let v = self.values[logits.0].numel();
        let row = self.reshape(logits, &[1, v])?;
        let ce = self.cross_entropy(row, &[target], &[1.0])?;
        self.reshape(ce, &[])
    }

    pub fn reduce(&mut self, x: Var, kind: ReduceKind) -> Var {
        let d = self.values[x.0].data();
        let v = match kind {
            ReduceKind::Sum => d.iter().sum(),
            ReduceKind::Mean => d.iter().sum::<f64>() / d.len() as f64,
            ReduceKind::SquaredL2Norm => d.iter().map(|x| x * x).sum(),
        };
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Reduce(x, kind), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceKind::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceKind::Mean)
    }

    pub fn squared_l2_norm(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceKind::SquaredL2Norm)
    }

    /// Sums a matrix over `axis` (0: down the rows, giving `[cols]`; 1: across
    /// each row, giving `[rows]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.values[x.0];
        let (rows, cols) = require_2d("sum_axis", t)?;
        let out = match axis {
            0 => {
                let mut o = vec![0.0; cols];
                for r in 0..rows {
                    for (oc, v) in o.iter_mut().zip(t.row(r)) {
                        *oc += v;
                    }
                }
                o
            }
            1 => (0..rows).map(|r| t.row(r).iter().sum()).collect(),
            _ => {
                return Err(Error::Index {
                    op: "sum_axis",
                    index: axis,
                    size: 2,
                })
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::SumAxis { x, axis }, rg))
    }

    /// Elementwise `max(x, floor)`. Gradient flows only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let t = &self.values[x.0];
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(floor)).collect())
            .expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(out, Op::ClampMin { x, floor }, rg)
    }

    /// Resets every gradient buffer, leaves included.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Backpropagates from the scalar `loss` through its recorded ancestry.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        for (g, leaf) in self.grads.iter_mut().zip(&self.leaves) {
            if leaf.is_none() {
                *g = None;
            }
        }
        if !self.requires_grad[loss.0] {
            return Ok(());
        }
        match &mut self.grads[loss.0] {
            Some(g) => g[0] += 1.0,
            slot @ None => *slot = Some(vec![1.0]),
        }
        for i in (0..=loss.0).rev() {
            if self.leaves[i].is_some() || !self.requires_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Runs [`backward`](Self::backward) and adds each parameter leaf's gradient
    /// into `store`, then clears the tape's leaf gradients.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        for (i, leaf) in self.leaves.iter().enumerate() {
            if let (Some(LeafKind::Param(id)), Some(g)) = (leaf, &self.grads[i]) {
                store.accumulate_grad(*id, g, 1.0)?;
            }
        }
        self.zero_grads();
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let Tape {
            values,
            grads,
            ops,
            requires_grad,
            fault,
            ..
        } = self;
        let values: &[Tensor] = values;
        let mut sink = GradSink {
            values,
            grads,
            requires_grad,
        };
        match &ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink.accumulate_broadcast(*a, g.len(), |j| g[j]);
                sink.accumulate_broadcast(*b, g.len(), |j| g[j]);
            }
            Op::Sub(a, b) => {
                sink.accumulate_broadcast(*a, g.len(), |j| g[j]);
                sink.accumulate_broadcast(*b, g.len(), |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                let pick = |v: &[f64], j: usize| if v.len() == 1 { v[0] } else { v[j] };
                sink.accumulate_broadcast(*a, g.len(), |j| g[j] * pick(vb, j));
                sink.accumulate_broadcast(*b, g.len(), |j| g[j] * pick(va, j));
            }
            Op::Scale(a, f) => sink.accumulate(*a, |j| g[j] * f),
            Op::AddScalar(a) => sink.accumulate(*a, |j| g[j]),
            Op::Unary(a, kind) => {
                let y = values[i].data();
                match kind {
                    PointwiseKind::Sigmoid => {
                        if *fault == Some(Fault::SigmoidBackward) {
                            sink.accumulate(*a, |j| g[j] * y[j]);
                        } else {
                            sink.accumulate(*a, |j| g[j] * y[j] * (1.0 - y[j]));
                        }
                    }
                    PointwiseKind::Tanh => sink.accumulate(*a, |j| g[j] * (1.0 - y[j] * y[j])),
                    PointwiseKind::Exp => sink.accumulate(*a, |j| g[j] * y[j]),
                    PointwiseKind::Negate => sink.accumulate(*a, |j| -g[j]),
                    PointwiseKind::Log => {
                        let x = values[a.0].data();
                        sink.accumulate(*a, |j| g[j] / x[j]);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = values[a.0].dims2();
                let n = values[b.0].dims2().1;
                if let Some(slot) = sink.slot(*a) {
                    gemm(m, n, k, 1.0, g, false, values[b.0].data(), true, 1.0, slot);
                }
                if let Some(slot) = sink.slot(*b) {
                    gemm(k, m, n, 1.0, values[a.0].data(), true, g, false, 1.0, slot);
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, inp) = values[x.0].dims2();
                let outp = values[w.0].dims2().0;
                if let Some(slot) = sink.slot(*x) {
                    gemm(rows, outp, inp, 1.0, g, false, values[w.0].data(), false, 1.0, slot);
                }
                if let Some(slot) = sink.slot(*w) {
                    gemm(outp, rows, inp, 1.0, g, true, values[x.0].data(), false, 1.0, slot);
                }
                if let Some(slot) = b.and_then(|b| sink.slot(b)) {
                    for r in 0..rows {
                        for (acc, gv) in slot.iter_mut().zip(&g[r * outp..(r + 1) * outp]) {
                            *acc += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = values[i].dims2();
                let mut offset = 0;
                for p in parts {
                    let w = values[p.0].dims2().1;
                    if let Some(slot) = sink.slot(*p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (acc, gv) in slot[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *acc += gv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = values[i].dims2();
                let cols = values[x.0].dims2().1;
                if let Some(slot) = sink.slot(*x) {
                    for r in 0..rows {
                        let dst = &mut slot[r * cols + start..r * cols + start + len];
                        for (acc, gv) in dst.iter_mut().zip(&g[r * len..(r + 1) * len]) {
                            *acc += gv;
                        }
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = values[p.0].numel();
                    let src = &g[offset..offset + n];
                    sink.accumulate(*p, |j| src[j]);
                    offset += n;
                }
            }
            Op::Reshape(x) => sink.accumulate(*x, |j| g[j]),
            Op::EmbedColumns { table, ids } => {
                let (w, vocab) = values[table.0].dims2();
                if let Some(slot) = sink.slot(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..w {
                            slot[c * vocab + id] += g[r * w + c];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = values[logits.0].dims2().1;
                if let Some(slot) = sink.slot(*logits) {
                    for (r, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                        if wt == 0.0 || g[r] == 0.0 {
                            continue;
                        }
                        let scale = g[r] * wt;
                        let row = &mut slot[r * vocab..(r + 1) * vocab];
                        for (acc, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *acc += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::Reduce(x, kind) => {
                let g0 = g[0];
                match kind {
                    ReduceKind::Sum => sink.accumulate(*x, |_| g0),
                    ReduceKind::Mean => {
                        let n = values[x.0].numel() as f64;
                        sink.accumulate(*x, |_| g0 / n);
                    }
                    ReduceKind::SquaredL2Norm => {
                        let xv = values[x.0].data();
                        sink.accumulate(*x, |j| 2.0 * xv[j] * g0);
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let cols = values[x.0].dims2().1;
                if *axis == 0 {
                    sink.accumulate(*x, |j| g[j % cols]);
                } else {
                    sink.accumulate(*x, |j| g[j / cols]);
                }
            }
            Op::ClampMin { x, floor } => {
                let xv = values[x.0].data();
                sink.accumulate(*x, |j| if xv[j] > *floor { g[j] } else { 0.0 });
            }
        }
    }
}

/// Mutable view of the gradient buffers, disjoint from the node values.
struct GradSink<'a> {
    values: &'a [Tensor],
    grads: &'a mut [Option<Vec<f64>>],
    requires_grad: &'a [bool],
}

impl GradSink<'_> {
    fn slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.requires_grad[v.0] {
            return None;
        }
        let n = self.values[v.0].numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn accumulate(&mut self, v: Var, f: impl Fn(usize) -> f64) {
        if let Some(slot) = self.slot(v) {
            for (i, acc) in slot.iter_mut().enumerate() {
                *acc += f(i);
            }
        }
    }

    /// Gradient into a possibly scalar-broadcast operand of a binary op.
    fn accumulate_broadcast(&mut self, v: Var, out_len: usize, f: impl Fn(usize) -> f64) {
        if !self.requires_grad[v.0] {
            return;
        }
        if self.values[v.0].numel() == out_len {
            self.accumulate(v, f);
        } else {
            let total: f64 = (0..out_len).map(f).sum();
            self.accumulate(v, |_| total);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_column_selection() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = tape.constant(Tensor::eye(2));
        let sel = tape.constant(Tensor::matrix(&[vec![0.0], vec![1.0]]).unwrap());
        let ai = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let col = tape.matmul(a, sel).unwrap();
        assert_eq!(tape.value(col).shape(), &[2, 1]);
        assert_eq!(tape.value(col).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn pointwise_values_at_zero() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::vector(vec![0.0]));
        let s = tape.sigmoid(z);
        let t = tape.tanh(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(t).data(), &[0.0]);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert!(close(tape.grad(z).unwrap(), &[0.25], 1e-15));
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
        let big = tape.input(Tensor::vector(vec![1000.0]));
        assert!(matches!(tape.exp(big), Err(Error::Domain { .. })));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2]));
        let b = tape.input(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
        let s = tape.constant(Tensor::scalar(2.0));
        let ok = tape.mul(a, s).unwrap();
        assert_eq!(tape.shape(ok), &[2]);
    }

    #[test]
    fn cross_entropy_uniform_and_stable() {
        let mut tape = Tape::new();
        let l = tape.input(Tensor::vector(vec![0.3; 4]));
        let ce = tape.softmax_cross_entropy(l, 2).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-12);

        let big = tape.input(Tensor::vector(vec![1000.0, 0.0]));
        let ce = tape.softmax_cross_entropy(big, 0).unwrap();
        let v = tape.value(ce).item();
        assert!(v.is_finite() && v.abs() < 1e-12);

        assert!(matches!(
            tape.softmax_cross_entropy(l, 4),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![3.0, 4.0]));
        let n = tape.squared_l2_norm(x);
        assert_eq!(tape.value(n).item(), 25.0);
        let y = tape.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let m = tape.mean(y);
        assert_eq!(tape.value(m).item(), 2.0);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        let n = tape.squared_l2_norm(x);
        tape.backward(n).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        // leaf gradients accumulate until zeroed
        tape.backward(n).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        tape.zero_grads();
        tape.backward(n).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn same_var_used_twice() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![3.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn clamp_min_passes_gradient_only_above_floor() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![10.0, 3.0, 8.0]));
        let c = tape.clamp_min(x, 8.0);
        assert_eq!(tape.value(c).data(), &[10.0, 8.0, 8.0]);
        let l = tape.sum(c);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }
}
