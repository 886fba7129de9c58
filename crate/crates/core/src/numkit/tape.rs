//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to apply its vector-Jacobian product. Nodes only reference earlier
//! nodes, so walking the tape backwards is a valid topological order.
//! Parameters are borrowed from a [`ParamStore`] rather than copied.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::params::{ParamGrads, ParamId, ParamStore};
use super::scalar::{gemm, Real};
use super::tensor::{layer_norm_stats, softmax_rows, Tensor, MASKED_BELOW};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used to prove that gradient checking
/// catches a broken rule.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    /// Drops the `dgamma` contribution of layer norm.
    LayerNormGamma,
    /// Scales the tanh derivative by 1.5.
    TanhScale,
    /// Forgets the `- y·Σ dy·y` term of softmax.
    SoftmaxCenter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

enum Value<'p, T: Real> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T: Real> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        b_trans: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax {
        x: Var,
        probs: Vec<T>,
        allowed: Vec<bool>,
    },
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Pool {
        x: Var,
        groups: Vec<Vec<usize>>,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Select {
        x: Var,
        idx: Vec<usize>,
    },
    StackLast(Vec<Var>),
    SumLast(Var),
    Reshape(Var),
}

struct Node<'p, T: Real> {
    value: Value<'p, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for one forward/backward pass.
///
/// A tape is single-writer. Independent samples should use independent
/// tapes; they may borrow the same [`ParamStore`] concurrently.
pub struct Tape<'p, T: Real = f64> {
    nodes: Vec<Node<'p, T>>,
    params: Option<&'p ParamStore<T>>,
    param_nodes: Vec<Option<Var>>,
    fault: Option<GradFault>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
            param_nodes: Vec::new(),
            fault: None,
        }
    }

    /// A tape whose parameter leaves borrow from `store`.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Tape {
            nodes: Vec::with_capacity(512),
            params: Some(store),
            param_nodes: vec![None; store.len()],
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<GradFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: Value::Owned(tensor),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a constant (never differentiated) leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// The node for parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let store = self.params.expect("tape was not created with a parameter store");
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[a, b])
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(x).map(f).with_requires_grad(false);
        self.push(out, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::tensor::matmul_ex(self.value(a), self.value(b), false)?;
        Ok(self.push(out, Op::MatMul { a, b, b_trans: false }, &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::tensor::matmul_ex(self.value(a), self.value(b), true)?;
        Ok(self.push(out, Op::MatMul { a, b, b_trans: true }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.cols();
        if vb.len() != d {
            return Err(Error::Shape {
                op: "add_row",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut out = vx.clone().with_requires_grad(false);
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o = *o + *b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, bias }, &[x, bias]))
    }

    /// `x · w + b` for a `[rows, in]` input, `[in, out]` weight and `[out]` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::Shape {
                op: "mul_const",
                left: self.shape(x).to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let vx = self.value(x);
        let data = vx.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(x, c.data().to_vec()), &[x]))
    }

    /// Multiplies row `r` of a matrix by `keep[r]` (0 or 1).
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let v = self.value(x);
        let d = v.cols();
        if keep.len() != v.rows() {
            return Err(Error::Shape {
                op: "mask_rows",
                left: v.shape().to_vec(),
                right: vec![keep.len()],
            });
        }
        let data: Vec<T> = keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { T::one() } else { T::zero() }, d))
            .collect();
        let c = Tensor::new(v.shape().to_vec(), data)?;
        self.mul_const(x, &c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) = layer_norm_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// Softmax over the last dimension of `x + mask`; fully masked rows give
    /// zeros. Returns the output and per-row validity.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor<T>) -> Result<(Var, Vec<bool>)> {
        let (out, valid) = super::tensor::masked_softmax(self.value(x), mask)?;
        Ok((self.push(out, Op::Softmax(x), &[x]), valid))
    }

    /// Log-softmax over the last dimension; masked entries (and fully masked
    /// rows) get the value `NEG_INF` and no gradient.
    pub fn log_softmax(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(m) = mask {
            if m.shape() != vx.shape() {
                return Err(Error::Shape {
                    op: "log_softmax",
                    left: vx.shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
        }
        let cols = vx.cols();
        let mut probs = vec![T::zero(); vx.len()];
        softmax_rows(vx.data(), mask.map(Tensor::data), cols, &mut probs);
        let threshold = T::from_f64(MASKED_BELOW);
        let allowed: Vec<bool> = match mask {
            Some(m) => m.data().iter().map(|&v| v > threshold).collect(),
            None => vec![true; vx.len()],
        };
        let neg = T::from_f64(super::tensor::NEG_INF);
        let mut out = Tensor::zeros(vx.shape().to_vec());
        for r in 0..vx.rows() {
            let xs = vx.row(r);
            let al = &allowed[r * cols..(r + 1) * cols];
            let max = xs
                .iter()
                .zip(al)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            let lse = if max == T::neg_infinity() {
                T::zero()
            } else {
                let s: T = xs
                    .iter()
                    .zip(al)
                    .filter(|(_, &a)| a)
                    .map(|(&v, _)| (v - max).exp())
                    .sum();
                max + s.ln()
            };
            for j in 0..cols {
                out.data_mut()[r * cols + j] = if al[j] && max != T::neg_infinity() {
                    xs[j] - lse
                } else {
                    neg
                };
            }
        }
        Ok(self.push(out, Op::LogSoftmax { x, probs, allowed }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Rows of `table` at `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let d = t.cols();
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::contract(format!(
                "row id {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.as_2d("slice_cols")?;
        if start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: v.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).as_2d("concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).as_2d("concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.as_2d("slice_rows")?;
        if start + len > r {
            return Err(Error::Shape {
                op: "slice_rows",
                left: v.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let data = v.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Stacks 2-D blocks (or 1-D rows) with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols || v.shape().len() > 2 {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// One output row per group: the columnwise max (or mean) over the listed
    /// rows of `x`. Empty groups produce zero rows.
    pub fn pool_rows(&mut self, x: Var, groups: &[Vec<usize>], kind: PoolKind) -> Result<Var> {
        let v = self.value(x);
        let (r, d) = v.as_2d("pool_rows")?;
        if groups.iter().flatten().any(|&i| i >= r) {
            return Err(Error::contract("pool_rows: row index out of range"));
        }
        let mut out = Tensor::zeros(vec![groups.len(), d]);
        let mut argmax = Vec::new();
        for (g, rows) in groups.iter().enumerate() {
            let o = &mut out.data_mut()[g * d..(g + 1) * d];
            if rows.is_empty() {
                if kind == PoolKind::Max {
                    argmax.extend(std::iter::repeat_n(usize::MAX, d));
                }
                continue;
            }
            match kind {
                PoolKind::Max => {
                    for j in 0..d {
                        let mut best = rows[0];
                        for &i in &rows[1..] {
                            if v.at(i, j) > v.at(best, j) {
                                best = i;
                            }
                        }
                        o[j] = v.at(best, j);
                        argmax.push(best);
                    }
                }
                PoolKind::Mean => {
                    let inv = T::one() / T::from_f64(rows.len() as f64);
                    for &i in rows {
                        for j in 0..d {
                            o[j] = o[j] + v.at(i, j) * inv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Pool {
                x,
                groups: groups.to_vec(),
                kind,
                argmax,
            },
            &[x],
        ))
    }

    /// Picks elements by flat index into a 1-D tensor.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(Error::contract(format!(
                "select index {bad} out of range for {:?}",
                v.shape()
            )));
        }
        let data = idx.iter().map(|&i| v.data()[i]).collect();
        let out = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push(out, Op::Select { x, idx: idx.to_vec() }, &[x]))
    }

    /// Stacks equally shaped tensors along a new trailing axis.
    pub fn stack_last(&mut self, parts: &[Var]) -> Result<Var> {
        let shape = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::Shape {
                    op: "stack_last",
                    left: shape,
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let k = parts.len();
        let len = self.value(parts[0]).len();
        let mut data = vec![T::zero(); len * k];
        for (j, &p) in parts.iter().enumerate() {
            for (i, &v) in self.value(p).data().iter().enumerate() {
                data[i * k + j] = v;
            }
        }
        let mut out_shape = shape;
        out_shape.push(k);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::StackLast(parts.to_vec()), parts))
    }

    /// Sums over the trailing axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let k = v.cols();
        let data: Vec<T> = v.data().chunks(k.max(1)).map(|c| c.iter().copied().sum()).collect();
        let shape = v.shape()[..v.shape().len().saturating_sub(1)].to_vec();
        let out = Tensor::new(shape, data).expect("trailing axis removed");
        self.push(out, Op::SumLast(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?.with_requires_grad(false);
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients {
            leaves: HashMap::new(),
            params: Vec::new(),
        };
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !node.requires_grad {
                continue;
            }
            let shape = node.value.get().shape().to_vec();
            let data = grads[i]
                .take()
                .unwrap_or_else(|| vec![T::zero(); node.value.get().len()]);
            match node.op {
                Op::Leaf => {
                    out.leaves.insert(i, Tensor::new(shape, data)?);
                }
                Op::Param(id) => out.params.push((id, Tensor::new(shape, data)?)),
                _ => {}
            }
        }
        Ok(out)
    }

    // Adds `f(j)` into the gradient buffer of `v` for every element j.
    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.get().len();
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        for (j, b) in buf.iter_mut().enumerate() {
            *b = *b + f(j);
        }
    }

    fn apply_vjp(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.get();
        let val = |v: Var| self.nodes[v.0].value.get();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, b_trans } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let p = y.shape()[1];
                if wants(*a) {
                    let buf = grads[a.0].get_or_insert_with(|| vec![T::zero(); m * k]);
                    // dA = dC · op(B)ᵀ
                    gemm(m, p, k, g, false, vb.data(), !*b_trans, buf, true);
                }
                if wants(*b) {
                    let buf = grads[b.0].get_or_insert_with(|| vec![T::zero(); k * p]);
                    if *b_trans {
                        // B is [p×k]: dB = dCᵀ · A
                        gemm(p, m, k, g, true, va.data(), false, buf, true);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, p, va.data(), true, g, false, buf, true);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |j| g[j]);
                self.acc(grads, *b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |j| g[j]);
                self.acc(grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                self.acc(grads, *a, |j| g[j] * vb[j]);
                self.acc(grads, *b, |j| g[j] * va[j]);
            }
            Op::AddRow { x, bias } => {
                self.acc(grads, *x, |j| g[j]);
                let d = val(*bias).len();
                if wants(*bias) {
                    let buf = grads[bias.0].get_or_insert_with(|| vec![T::zero(); d]);
                    for row in g.chunks(d) {
                        for (b, v) in buf.iter_mut().zip(row) {
                            *b = *b + *v;
                        }
                    }
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, |j| g[j] * *c),
            Op::MulConst(x, c) => self.acc(grads, *x, |j| g[j] * c[j]),
            Op::Relu(x) => {
                let ys = y.data();
                self.acc(grads, *x, |j| if ys[j] > T::zero() { g[j] } else { T::zero() });
            }
            Op::Sigmoid(x) => {
                let ys = y.data();
                self.acc(grads, *x, |j| g[j] * ys[j] * (T::one() - ys[j]));
            }
            Op::Tanh(x) => {
                let ys = y.data();
                let k = if self.fault == Some(GradFault::TanhScale) {
                    T::from_f64(1.5)
                } else {
                    T::one()
                };
                self.acc(grads, *x, |j| g[j] * (T::one() - ys[j] * ys[j]) * k);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(*gamma).len();
                let gm = val(*gamma).data();
                if wants(*x) {
                    let n = T::from_f64(d as f64);
                    let buf = grads[x.0].get_or_insert_with(|| vec![T::zero(); xhat.len()]);
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            buf[r * d + j] = buf[r * d + j] + *is / n * (n * dh - s1 - hr[j] * s2);
                        }
                    }
                }
                if wants(*gamma) && self.fault != Some(GradFault::LayerNormGamma) {
                    let buf = grads[gamma.0].get_or_insert_with(|| vec![T::zero(); d]);
                    for (j, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        buf[j % d] = buf[j % d] + *gv * *h;
                    }
                }
                if wants(*beta) {
                    let buf = grads[beta.0].get_or_insert_with(|| vec![T::zero(); d]);
                    for (j, gv) in g.iter().enumerate() {
                        buf[j % d] = buf[j % d] + *gv;
                    }
                }
            }
            Op::Softmax(x) => {
                if !wants(*x) {
                    return;
                }
                let cols = y.cols();
                let ys = y.data();
                let center = self.fault != Some(GradFault::SoftmaxCenter);
                let buf = grads[x.0].get_or_insert_with(|| vec![T::zero(); ys.len()]);
                for r in 0..y.rows() {
                    let range = r * cols..(r + 1) * cols;
                    let dot: T = if center {
                        g[range.clone()]
                            .iter()
                            .zip(&ys[range.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum()
                    } else {
                        T::zero()
                    };
                    for j in range {
                        buf[j] = buf[j] + ys[j] * (g[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { x, probs, allowed } => {
                if !wants(*x) {
                    return;
                }
                let cols = y.cols();
                let buf = grads[x.0].get_or_insert_with(|| vec![T::zero(); probs.len()]);
                for r in 0..y.rows() {
                    let range = r * cols..(r + 1) * cols;
                    let total: T = range.clone().filter(|&j| allowed[j]).map(|j| g[j]).sum();
                    for j in range {
                        if allowed[j] {
                            buf[j] = buf[j] + g[j] - probs[j] * total;
                        }
                    }
                }
            }
            Op::Sum(x) => self.acc(grads, *x, |_| g[0]),
            Op::Gather { table, ids } => {
                if !wants(*table) {
                    return;
                }
                let t = val(*table);
                let d = t.cols();
                let buf = grads[table.0].get_or_insert_with(|| vec![T::zero(); t.len()]);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        buf[id * d + j] = buf[id * d + j] + g[r * d + j];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let len = y.cols();
                if !wants(*x) {
                    return;
                }
                let total = val(*x).len();
                let buf = grads[x.0].get_or_insert_with(|| vec![T::zero(); total]);
                for r in 0..y.rows() {
                    for j in 0..len {
                        let k = r * c + start + j;
                        buf[k] = buf[k] + g[r * len + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let len = val(p).len();
                        let buf = grads[p.0].get_or_insert_with(|| vec![T::zero(); len]);
                        for r in 0..y.rows() {
                            for j in 0..c {
                                buf[r * c + j] = buf[r * c + j] + g[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = y.cols();
                let off = start * c;
                let n = y.len();
                if !wants(*x) {
                    return;
                }
                let total = val(*x).len();
                let buf = grads[x.0].get_or_insert_with(|| vec![T::zero(); total]);
                for j in 0..n {
                    buf[off + j] = buf[off + j] + g[j];
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    self.acc(grads, p, |j| g[off + j]);
                    off += len;
                }
            }
            Op::Pool {
                x,
                groups,
                kind,
                argmax,
            } => {
                if !wants(*x) {
                    return;
                }
                let d = y.cols();
                let total = val(*x).len();
                let buf = grads[x.0].get_or_insert_with(|| vec![T::zero(); total]);
                for (gi, rows) in groups.iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    match kind {
                        PoolKind::Max => {
                            for j in 0..d {
                                let r = argmax[gi * d + j];
                                buf[r * d + j] = buf[r * d + j] + g[gi * d + j];
                            }
                        }
                        PoolKind::Mean => {
                            let inv = T::one() / T::from_f64(rows.len() as f64);
                            for &r in rows {
                                for j in 0..d {
                                    buf[r * d + j] = buf[r * d + j] + g[gi * d + j] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Select { x, idx } => {
                if !wants(*x) {
                    return;
                }
                let total = val(*x).len();
                let buf = grads[x.0].get_or_insert_with(|| vec![T::zero(); total]);
                for (k, &i) in idx.iter().enumerate() {
                    buf[i] = buf[i] + g[k];
                }
            }
            Op::StackLast(parts) => {
                let k = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    self.acc(grads, p, |i| g[i * k + j]);
                }
            }
            Op::SumLast(x) => {
                let k = val(*x).cols();
                self.acc(grads, *x, |j| g[j / k]);
            }
            Op::Reshape(x) => self.acc(grads, *x, |j| g[j]),
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Real = f64> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    /// Adds `scale ·` every parameter gradient into `acc`.
    pub fn accumulate_into(&self, acc: &mut ParamGrads<T>, scale: T) {
        for (id, g) in &self.params {
            acc.accumulate(*id, g, scale);
        }
    }
}
