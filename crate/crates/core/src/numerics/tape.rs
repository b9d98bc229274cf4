//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in execution order. Values live in
//! the tape's arena and are addressed by copyable [`Var`] handles, so a
//! computation is written as a sequence of `tape.op(..)?` calls. Calling
//! [`Tape::backward`] on a scalar replays the record in reverse and
//! returns the gradient of every `requires_grad` leaf.
//!
//! ```
//! use abmll::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The elementwise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Square,
    Sqrt,
    Softplus,
    Abs,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Square,
    Sqrt,
    Softplus,
    Abs,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, a: Var },
    Custom { a: Var, deriv: fn(f64) -> f64 },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Transpose { a: Var },
    Sum { a: Var },
    SumAxis { a: Var, outer: usize, len: usize, inner: usize },
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Gather { table: Var, indices: Vec<usize> },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Softmax { a: Var },
    LayerNorm { a: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

/// Gradients of the `requires_grad` leaves produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::dim(op, self.shape(v), &[0, 0]))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = |b: Option<Var>| {
            b.ok_or_else(|| Error::Contract(format!("{op:?} needs a second operand")))
        };
        match op {
            Elementwise::Add => self.add(a, binary(b)?),
            Elementwise::Sub => self.sub(a, binary(b)?),
            Elementwise::Mul => self.mul(a, binary(b)?),
            Elementwise::Exp => Ok(self.exp(a)),
            Elementwise::Log => self.log(a),
            Elementwise::Square => Ok(self.square(a)),
            Elementwise::Sqrt => self.sqrt(a),
            Elementwise::Softplus => Ok(self.softplus(a)),
            Elementwise::Abs => Ok(self.abs(a)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(BinaryKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = if av.shape() == bv.shape() || bv.numel() == 1 {
            av.shape().to_vec()
        } else if av.numel() == 1 {
            bv.shape().to_vec()
        } else {
            return Err(Error::dim("elementwise", av.shape(), bv.shape()));
        };
        let n = av.numel().max(bv.numel());
        let (ad, bd) = (av.data(), bv.data());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data = (0..n)
            .map(|i| {
                let (x, y) = (pick(ad, i), pick(bd, i));
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b }, &[a, b]))
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let value = self.value(a).map(|x| match kind {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Square => x * x,
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Gelu => gelu(x),
        });
        self.push(value, Op::Unary { kind, a }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.require_positive("log", a)?;
        Ok(self.unary(UnaryKind::Log, a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.require_positive("sqrt", a)?;
        Ok(self.unary(UnaryKind::Sqrt, a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    /// Elementwise `f` with a caller-supplied derivative `deriv`.
    pub fn custom_unary(&mut self, a: Var, f: fn(f64) -> f64, deriv: fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, Op::Custom { a, deriv }, &[a])
    }

    fn require_positive(&self, op: &'static str, a: Var) -> Result<()> {
        match self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            Some(x) => Err(Error::Domain {
                op,
                detail: format!("non-positive input {x}"),
            }),
            None => Ok(()),
        }
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale { a, factor }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a).map(|x| x + offset);
        self.push(value, Op::AddScalar { a }, &[a])
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a · bᵀ`, the row-major form of applying weight `b[d_out×d_in]` to
    /// row vectors `a[n×d_in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let data = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::MatMulNt { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, data)?;
        Ok(self.push(value, Op::Transpose { a }, &[a]))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
            },
            &[a],
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", self.shape(a), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    // ---- row broadcasting and indexing -----------------------------------

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_op("add_row", a, row, |x, r| x + r)?;
        Ok(self.push(value, Op::AddRow { a, row }, &[a, row]))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_op("mul_row", a, row, |x, r| x * r)?;
        Ok(self.push(value, Op::MulRow { a, row }, &[a, row]))
    }

    fn row_op(
        &self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (n, d) = self.dims2(op, a)?;
        let r = self.value(row);
        if r.numel() != d {
            return Err(Error::dim(op, self.shape(a), r.shape()));
        }
        let src = self.value(a).data();
        let rd = r.data();
        let data = (0..n * d).map(|i| f(src[i], rd[i % d])).collect();
        Tensor::matrix(n, d, data)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("gather_rows", table)?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= v {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: ix,
                    bound: v,
                });
            }
            data.extend_from_slice(&src[ix * d..(ix + 1) * d]);
        }
        let value = Tensor::matrix(indices.len(), d, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = self.dims2("slice_cols", a)?;
        if start >= end || end > d {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, end]));
        }
        let src = self.value(a).data();
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&src[i * d + start..i * d + end]);
        }
        let value = Tensor::matrix(n, w, data)?;
        Ok(self.push(value, Op::SliceCols { a, start }, &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = self.dims2("slice_rows", a)?;
        if start >= end || end > n {
            return Err(Error::dim("slice_rows", self.shape(a), &[start, end]));
        }
        let data = self.value(a).data()[start * d..end * d].to_vec();
        let value = Tensor::matrix(end - start, d, data)?;
        Ok(self.push(value, Op::SliceRows { a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (n, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pd) = self.dims2("concat_cols", p)?;
            if pn != n {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(n, total, data)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    // ---- normalization and losses ----------------------------------------

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// out (probability exactly zero).
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (n, d) = self.dims2("softmax_rows", a)?;
        let src = self.value(a).data();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let visible = if causal { (i + 1).min(d) } else { d };
            let row = &src[i * d..i * d + visible];
            softmax_into(row, &mut data[i * d..i * d + visible]);
        }
        let value = Tensor::matrix(n, d, data)?;
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// Normalizes each row to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims2("layer_norm_rows", a)?;
        let src = self.value(a).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for (o, &x) in xhat[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = (x - mean) * r;
            }
        }
        let value = Tensor::matrix(n, d, xhat.clone())?;
        Ok(self.push(value, Op::LayerNorm { a, xhat, rstd }, &[a]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, stabilized by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2("softmax_cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    op: "softmax_cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_into(row, &mut probs[i * v..(i + 1) * v]);
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Propagates from a scalar `loss` to every `requires_grad` leaf.
    ///
    /// Leaves unreachable from `loss` get zero gradients. A tape supports one
    /// backward pass until [`Tape::reset_grads`] is called; gradients are
    /// never accumulated across passes.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without reset_grads".into(),
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad {
                if grads[i].is_none() {
                    grads[i] = Some(vec![0.0; node.value.numel()]);
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    pub fn reset_grads(&mut self) {
        self.backward_done = false;
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let pick = |d: &[f64], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                for (side, v) in [(0, *a), (1, *b)] {
                    let Some(dst) = self.slot(grads, v) else { continue };
                    let broadcast = dst.len() == 1 && g.len() > 1;
                    for (j, &gj) in g.iter().enumerate() {
                        let local = match (kind, side) {
                            (BinaryKind::Add, _) => 1.0,
                            (BinaryKind::Sub, 0) => 1.0,
                            (BinaryKind::Sub, _) => -1.0,
                            (BinaryKind::Mul, 0) => pick(bd, j),
                            (BinaryKind::Mul, _) => pick(ad, j),
                            (BinaryKind::Div, 0) => 1.0 / pick(bd, j),
                            (BinaryKind::Div, _) => -pick(ad, j) / (pick(bd, j) * pick(bd, j)),
                        };
                        let k = if broadcast { 0 } else { j };
                        dst[k] += gj * local;
                    }
                }
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let y = out.data();
                let Some(dst) = self.slot(grads, *a) else { return };
                for j in 0..g.len() {
                    let local = match kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Exp => y[j],
                        UnaryKind::Log => 1.0 / x[j],
                        UnaryKind::Square => 2.0 * x[j],
                        UnaryKind::Sqrt => 0.5 / y[j],
                        UnaryKind::Softplus => sigmoid(x[j]),
                        UnaryKind::Abs => {
                            if x[j] > 0.0 {
                                1.0
                            } else if x[j] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Gelu => gelu_deriv(x[j]),
                    };
                    dst[j] += g[j] * local;
                }
            }
            Op::Custom { a, deriv } => {
                let x = self.value(*a).data();
                let Some(dst) = self.slot(grads, *a) else { return };
                for j in 0..g.len() {
                    dst[j] += g[j] * deriv(x[j]);
                }
            }
            Op::Scale { a, factor } => {
                if let Some(dst) = self.slot(grads, *a) {
                    for (d, gj) in dst.iter_mut().zip(g) {
                        *d += gj * factor;
                    }
                }
            }
            Op::AddScalar { a } => {
                if let Some(dst) = self.slot(grads, *a) {
                    for (d, gj) in dst.iter_mut().zip(g) {
                        *d += gj;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if self.nodes[a.0].needs_grad {
                    // dA = G · Bᵀ
                    let da = matmul_nt_raw(g, self.value(*b).data(), m, n, k);
                    add_into(self.slot(grads, *a).unwrap(), &da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · G
                    let db = matmul_tn_raw(self.value(*a).data(), g, m, k, n);
                    add_into(self.slot(grads, *b).unwrap(), &db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().0;
                if self.nodes[a.0].needs_grad {
                    // C = A·Bᵀ, dA = G · B
                    let da = matmul_raw(g, self.value(*b).data(), m, n, k);
                    add_into(self.slot(grads, *a).unwrap(), &da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Gᵀ · A
                    let db = matmul_tn_raw(g, self.value(*a).data(), m, n, k);
                    add_into(self.slot(grads, *b).unwrap(), &db);
                }
            }
            Op::Transpose { a } => {
                let (m, n) = self.value(*a).dims2().unwrap();
                if let Some(dst) = self.slot(grads, *a) {
                    for r in 0..m {
                        for c in 0..n {
                            dst[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(dst) = self.slot(grads, *a) {
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
            } => {
                if let Some(dst) = self.slot(grads, *a) {
                    for o in 0..*outer {
                        for l in 0..*len {
                            let base = (o * len + l) * inner;
                            for k in 0..*inner {
                                dst[base + k] += g[o * inner + k];
                            }
                        }
                    }
                }
            }
            Op::AddRow { a, row } => {
                let d = self.value(*row).numel();
                if let Some(dst) = self.slot(grads, *a) {
                    add_into(dst, g);
                }
                if let Some(dst) = self.slot(grads, *row) {
                    for (j, gj) in g.iter().enumerate() {
                        dst[j % d] += gj;
                    }
                }
            }
            Op::MulRow { a, row } => {
                let d = self.value(*row).numel();
                let rd = self.value(*row).data();
                let ad = self.value(*a).data();
                if let Some(dst) = self.slot(grads, *a) {
                    for (j, gj) in g.iter().enumerate() {
                        dst[j] += gj * rd[j % d];
                    }
                }
                if let Some(dst) = self.slot(grads, *row) {
                    for (j, gj) in g.iter().enumerate() {
                        dst[j % d] += gj * ad[j];
                    }
                }
            }
            Op::Gather { table, indices } => {
                let d = self.value(*table).dims2().unwrap().1;
                if let Some(dst) = self.slot(grads, *table) {
                    for (r, &ix) in indices.iter().enumerate() {
                        for c in 0..d {
                            dst[ix * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let (n, d) = self.value(*a).dims2().unwrap();
                let w = out.dims2().unwrap().1;
                if let Some(dst) = self.slot(grads, *a) {
                    for r in 0..n {
                        for c in 0..w {
                            dst[r * d + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let d = self.value(*a).dims2().unwrap().1;
                if let Some(dst) = self.slot(grads, *a) {
                    add_into(&mut dst[start * d..start * d + g.len()], g);
                }
            }
            Op::ConcatCols { parts } => {
                let (n, total) = out.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    if let Some(dst) = self.slot(grads, p) {
                        for r in 0..n {
                            add_into(
                                &mut dst[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Softmax { a } => {
                let (n, d) = out.dims2().unwrap();
                let p = out.data();
                if let Some(dst) = self.slot(grads, *a) {
                    for r in 0..n {
                        let pr = &p[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for c in 0..d {
                            dst[r * d + c] += pr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, xhat, rstd } => {
                let (n, d) = out.dims2().unwrap();
                if let Some(dst) = self.slot(grads, *a) {
                    for r in 0..n {
                        let xr = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mean_g = gr.iter().sum::<f64>() / d as f64;
                        let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dst[r * d + c] += rstd[r] * (gr[c] - mean_g - xr[c] * mean_gx);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).dims2().unwrap().1;
                let n = targets.len();
                let scale = g[0] / n as f64;
                if let Some(dst) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            dst[r * v + c] += scale * (probs[r * v + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Stable softmax of `row` written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}
