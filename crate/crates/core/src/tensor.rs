//! Dense row-major tensors and the numeric kernels shared by the eager API
//! and the autodiff graph.

use crate::error::{param_err, Error, Result};
use crate::scalar::Scalar;

/// Default epsilon for [`Tensor::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense tensor with explicit shape metadata over a flat row-major buffer.
///
/// Every constructor validates `product(shape) == data.len()` and rejects
/// non-finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor"));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// shape product matches and check finiteness themselves.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(param_err("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn row_vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn scalar(v: T) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` of a matrix; vectors are treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            s => {
                let cols = s[s.len() - 1];
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Self::from_parts(shape, self.data))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(op, self, other)?;
        Self::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.map(|v| v * s)
    }

    pub fn relu6(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| relu6(v)).collect())
    }

    pub fn relu(&self) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| v.max(T::zero())).collect(),
        )
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = check_matrix("matmul", self)?;
        let (k2, n) = check_matrix("matmul", other)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nn(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = check_matrix("matmul_nt", self)?;
        let (n, k2) = check_matrix("matmul_nt", other)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = check_matrix("transpose", self)?;
        let mut out = vec![T::zero(); r * c];
        transpose(&self.data, &mut out, r, c);
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn softmax_rows(&self) -> Self {
        let (_, c) = self.dims2();
        let mut out = self.data.clone();
        if c > 0 {
            for row in out.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        Self::from_parts(self.shape.clone(), out)
    }

    /// Standardizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        let (_, e) = self.dims2();
        if e < 2 {
            return Err(param_err("layer_norm needs at least 2 features"));
        }
        if gain.numel() != e || bias.numel() != e {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: self.shape.clone(),
                right: gain.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); self.numel()];
        for (row, dst) in self.data.chunks(e).zip(out.chunks_mut(e)) {
            standardize(row, dst, eps);
            for j in 0..e {
                dst[j] = dst[j] * gain.data[j] + bias.data[j];
            }
        }
        Self::new(self.shape.clone(), out)
    }

    /// Column means over rows: `r×c → 1×c`.
    pub fn mean_rows(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![T::zero(); c];
        for row in self.data.chunks(c.max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(r.max(1) as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        Self::from_parts(vec![1, c], out)
    }

    /// Selects rows by index, e.g. to permute tokens or look up embeddings.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(param_err(format!("row index {i} out of range for {r} rows")));
            }
            out.extend_from_slice(self.row(i));
        }
        Ok(Self::from_parts(vec![idx.len(), c], out))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2();
        if start + len > c {
            return Err(param_err(format!("column slice {start}..{} of {c}", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(Self::from_parts(vec![r, len], out))
    }

    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let r = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != r) {
            return Err(param_err("concat_cols row mismatch"));
        }
        let c: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Ok(Self::from_parts(vec![r, c], out))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

fn check_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension {
            op,
            left: t.shape.clone(),
            right: vec![],
        }),
    }
}

pub(crate) fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

#[inline]
pub fn relu6<T: Scalar>(x: T) -> T {
    x.max(T::zero()).min(T::of(6.0))
}

/// Derivative of relu6, taking 0 at both kinks.
#[inline]
pub fn relu6_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() && x < T::of(6.0) {
        T::one()
    } else {
        T::zero()
    }
}

// ---- kernels on flat slices ----

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose<T: Scalar>(a: &[T], out: &mut [T], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Writes the standardized row into `dst`; returns `(mean, 1/sqrt(var+eps))`.
pub(crate) fn standardize<T: Scalar>(row: &[T], dst: &mut [T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for (d, &v) in dst.iter_mut().zip(row) {
        *d = (v - mean) * inv_std;
    }
    (mean, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn relu6_clamps() {
        assert_eq!(relu6(-1.0), 0.0);
        assert_eq!(relu6(3.0), 3.0);
        assert_eq!(relu6(7.0), 6.0);
    }

    #[test]
    fn matmul_examples() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&x).unwrap(), x);
        let p = m(&[&[1.0, 2.0]]).matmul(&m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(p.data(), &[11.0]);
        let a = Tensor::<f64>::zeros(&[2, 3]);
        match a.matmul(&a) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn nt_and_tn_agree_with_transpose() {
        let a = m(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = m(&[&[2.0, 1.0, 0.0], &[-1.0, 0.5, 2.0]]);
        let direct = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(a.matmul_nt(&b).unwrap(), direct);
        let mut tn = vec![0.0; 9];
        matmul_tn(a.data(), b.data(), &mut tn, 2, 3, 3);
        let expect = a.transpose().unwrap().matmul(&b).unwrap();
        assert_eq!(tn, expect.data());
    }

    #[test]
    fn softmax_examples() {
        let s = m(&[&[0.0, 0.0]]).softmax_rows();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = m(&[&[2f64.ln(), 0.0]]).softmax_rows();
        assert_relative_eq!(s.data()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(s.data()[1], 1.0 / 3.0, epsilon = 1e-15);
        let s = m(&[&[1000.0, 1000.0]]).softmax_rows();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let out = m(&[&[5.0, 5.0, 5.0]]).layer_norm(&ones, &zeros, 1e-5).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);

        let out = m(&[&[1.0, -1.0]])
            .layer_norm(&Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 0.0)
            .unwrap();
        assert_eq!(out.data(), &[1.0, -1.0]);

        let bias = Tensor::new(vec![3], vec![0.5, -2.0, 7.0]).unwrap();
        let out = m(&[&[1.0, 9.0, -3.0], &[0.1, 0.2, 0.3]])
            .layer_norm(&Tensor::zeros(&[3]), &bias, 1e-5)
            .unwrap();
        assert_eq!(out.row(0), bias.data());
        assert_eq!(out.row(1), bias.data());
    }

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn generic_over_f32() {
        let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::<f32>::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0f32]);
    }
}
