use crate::error::{Error, Result};

use super::scalar::{gemm, Real};

/// Additive mask value for "not attendable". Finite on purpose: `-inf` turns
/// `0 * mask` and `mask - mask` into NaN.
pub const NEG_INF: f64 = -1e9;

/// Any mask entry at or below this threshold counts as masked.
pub(crate) const MASKED_BELOW: f64 = NEG_INF * 0.5;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); len],
            requires_grad: false,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols()).unwrap_or(0)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn as_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }
}

/// Matrix product of `[m×k]` and `[k×p]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, b, false)
}

/// `a · bᵀ` when `b_trans`, otherwise `a · b`.
pub fn matmul_ex<T: Real>(a: &Tensor<T>, b: &Tensor<T>, b_trans: bool) -> Result<Tensor<T>> {
    let mismatch = || Error::Shape {
        op: "matmul",
        left: a.shape.clone(),
        right: b.shape.clone(),
    };
    let (m, k) = a.as_2d("matmul").map_err(|_| mismatch())?;
    let (br, bc) = b.as_2d("matmul").map_err(|_| mismatch())?;
    let (kb, p) = if b_trans { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(mismatch());
    }
    let mut out = Tensor::zeros(vec![m, p]);
    gemm(m, k, p, &a.data, false, &b.data, b_trans, &mut out.data, false);
    Ok(out)
}

/// Softmax over the last dimension after adding an additive mask of the same
/// shape. Rows whose every mask entry is masked come back as zeros and are
/// reported as invalid in the returned flags (one per row).
pub fn masked_softmax<T: Real>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
    if logits.shape != mask.shape {
        return Err(Error::Shape {
            op: "masked_softmax",
            left: logits.shape.clone(),
            right: mask.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(logits.shape.clone());
    let valid = softmax_rows(&logits.data, Some(&mask.data), logits.cols(), &mut out.data);
    Ok((out, valid))
}

pub(crate) fn softmax_rows<T: Real>(x: &[T], mask: Option<&[T]>, cols: usize, out: &mut [T]) -> Vec<bool> {
    let threshold = T::from_f64(MASKED_BELOW);
    let rows = x.len().checked_div(cols).unwrap_or(0);
    let mut valid = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let o = &mut out[r * cols..(r + 1) * cols];
        let ms = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let allowed = |j: usize| ms.is_none_or(|m| m[j] > threshold);
        let mut max = T::neg_infinity();
        for (j, &v) in xs.iter().enumerate() {
            if allowed(j) {
                let v = v + ms.map_or(T::zero(), |m| m[j]);
                if v > max {
                    max = v;
                }
            }
        }
        if max == T::neg_infinity() {
            o.fill(T::zero());
            valid.push(false);
            continue;
        }
        let mut total = T::zero();
        for (j, &v) in xs.iter().enumerate() {
            o[j] = if allowed(j) {
                let e = (v + ms.map_or(T::zero(), |m| m[j]) - max).exp();
                total = total + e;
                e
            } else {
                T::zero()
            };
        }
        for v in o.iter_mut() {
            *v = *v / total;
        }
        valid.push(true);
    }
    valid
}

/// Per-row standardization over the last dimension followed by `gamma`/`beta`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let (out, _, _) = layer_norm_stats(x, gamma, beta, eps)?;
    Ok(out)
}

/// Layer norm that also returns the normalized values and per-row inverse
/// standard deviations (needed by the backward rule).
pub(crate) fn layer_norm_stats<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d || d == 0 {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gamma.shape.clone(),
        });
    }
    let n = T::from_f64(d as f64);
    let eps = T::from_f64(eps);
    let rows = x.rows();
    let mut out = Tensor::zeros(x.shape.clone());
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x.data[r * d..(r + 1) * d];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (xs[j] - mean) * is;
            xhat[r * d + j] = h;
            out.data[r * d + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    Ok((out, xhat, inv_std))
}
