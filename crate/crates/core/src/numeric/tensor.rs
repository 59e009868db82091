use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{gelu_scalar, NumericError, Result, Scalar};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense row-major array. `shape.iter().product() == data.len()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericError::Shape {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    /// Samples i.i.d. `normal(0, std)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| S::lit(normal.sample(rng))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Samples i.i.d. uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| S::lit(rng.random_range(lo..hi))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)`, treating vectors as a single row and scalars as 1x1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                let c = *other.last().unwrap();
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(NumericError::Contract {
                op: "item",
                msg: format!("tensor of shape {:?} is not a scalar", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NumericError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(NumericError::NonFinite { op })
        }
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        self.ensure_finite(op)?;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.data.len() != other.data.len() || self.dims2() != other.dims2() {
            return Err(NumericError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Self {
            shape: self.shape.clone(),
            data,
        }
        .checked("add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Self {
            shape: self.shape.clone(),
            data,
        }
        .checked("sub")
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect();
        Self {
            shape: self.shape.clone(),
            data,
        }
        .checked("mul")
    }

    pub fn scale(&self, s: S) -> Result<Self> {
        self.map(|x| x * s).checked("scale")
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }

    pub fn norm_sq(&self) -> S {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    /// `A[m x k] . B[k x n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(NumericError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
        .checked("matmul")
    }

    /// `A[m x k] . B[n x k]^T`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2();
        let (n, k2) = other.dims2();
        if k != k2 {
            return Err(NumericError::Shape {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out.push(dot(a_row, b_row));
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
        .checked("matmul_nt")
    }

    /// `A[k x m]^T . B[k x n]`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(NumericError::Shape {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
        .checked("matmul_tn")
    }

    pub fn gelu(&self) -> Result<Self> {
        self.map(gelu_scalar).checked("gelu")
    }

    /// Max-subtracted softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        match axis {
            1 => self.softmax_rows(),
            0 => Ok(self.transpose().softmax_rows()?.transpose().reshape(&self.shape)?),
            _ => Err(NumericError::Contract {
                op: "softmax",
                msg: format!("axis {axis} out of range for a matrix"),
            }),
        }
    }

    pub fn softmax_rows(&self) -> Result<Self> {
        self.ensure_finite("softmax")?;
        let (r, c) = self.dims2();
        let mut out = self.data.clone();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        Self {
            shape: self.shape.clone(),
            data: out,
        }
        .checked("softmax")
    }

    /// Row-wise layer norm with affine `gamma`, `beta` over the last dim.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self) -> Result<Self> {
        Ok(self.layer_norm_with_stats(gamma, beta)?.0)
    }

    /// Layer norm that also returns the per-row normalized values and 1/std.
    pub(crate) fn layer_norm_with_stats(
        &self,
        gamma: &Self,
        beta: &Self,
    ) -> Result<(Self, Self, Vec<S>)> {
        let (r, c) = self.dims2();
        if gamma.numel() != c || beta.numel() != c {
            return Err(NumericError::Shape {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        let eps = S::lit(LAYER_NORM_EPS);
        let n = S::from_usize(c).unwrap();
        let mut xhat = vec![S::zero(); r * c];
        let mut out = vec![S::zero(); r * c];
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gamma.data[j] + beta.data[j];
            }
        }
        let out = Self {
            shape: self.shape.clone(),
            data: out,
        }
        .checked("layer_norm")?;
        let xhat = Self {
            shape: self.shape.clone(),
            data: xhat,
        };
        Ok((out, xhat, rstd))
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(NumericError::Shape {
                    op: "concat_rows",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, cols], data)
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows());
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for p in parts {
            if p.rows() != rows {
                return Err(NumericError::Shape {
                    op: "concat_cols",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Self::new(vec![rows, total], data)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2();
        if start > end || end > r {
            return Err(NumericError::Contract {
                op: "slice_rows",
                msg: format!("range {start}..{end} out of {r} rows"),
            });
        }
        Self::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2();
        if start > end || end > c {
            return Err(NumericError::Contract {
                op: "slice_cols",
                msg: format!("range {start}..{end} out of {c} columns"),
            });
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Self::new(vec![r, end - start], data)
    }

    /// Picks rows of a `[vocab x d]` table by index.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(NumericError::Contract {
                    op: "gather_rows",
                    msg: format!("row {id} out of {r}"),
                });
            }
            data.extend_from_slice(self.row(id));
        }
        Self::new(vec![ids.len(), c], data)
    }

    /// Mean over rows, as a `1 x cols` matrix.
    pub fn mean_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2();
        if r == 0 {
            return Err(NumericError::Contract {
                op: "mean_rows",
                msg: "no rows to average".into(),
            });
        }
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        let n = S::from_usize(r).unwrap();
        for o in &mut out {
            *o /= n;
        }
        Self::new(vec![1, c], out)?.checked("mean_rows")
    }
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
