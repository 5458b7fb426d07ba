//! Dense row-major tensors and the raw matrix kernels behind the tape ops.
//!
//! Tensors are plain values: a shape and a contiguous buffer. Mutation after
//! construction happens only through gradient accumulation inside the tape,
//! so shared ownership (`Arc<Tensor<T>>`) is safe across read-only uses.
//!
//! Floating-point reductions use a fixed lane count and a fixed reduction
//! tree, so results are bit-identical between runs regardless of optimizer
//! vectorization choices.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::scalar::Scalar;

/// Error type shared by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Operand shapes do not satisfy the operation's contract.
    ShapeMismatch { op: &'static str, detail: String },
    /// An operation produced NaN or Inf from finite inputs.
    NonFinite { op: &'static str },
    /// A non-shape precondition was violated (bad axis, duplicate index, ...).
    Contract { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "{op}: shape mismatch: {detail}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: produced non-finite values"),
            TensorError::Contract { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl core::error::Error for TensorError {}

pub type Result<T> = core::result::Result<T, TensorError>;

/// Dense row-major numeric array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {shape:?} implies {numel} elems, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::ZERO; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// 2-d constructor used pervasively by the model code.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a 2-d tensor.
    pub fn rows(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[0]
    }

    /// Column count of a 2-d tensor.
    pub fn cols(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    /// Same buffer under a new shape; element count must be preserved.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn transposed(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts the element type; `f32 -> f64` is exact.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// `acc += alpha * x`, elementwise over matching slices.
#[inline]
pub(crate) fn axpy<T: Scalar>(acc: &mut [T], alpha: T, x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

const LANES: usize = 8;

/// Dot product with a fixed 8-lane accumulator and a fixed reduction tree.
#[inline]
pub(crate) fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::ZERO; LANES];
    let chunks = x.len() / LANES;
    for c in 0..chunks {
        let xs = &x[c * LANES..(c + 1) * LANES];
        let ys = &y[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += xs[l] * ys[l];
        }
    }
    for i in chunks * LANES..x.len() {
        acc[i % LANES] += x[i] * y[i];
    }
    let a = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let b = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    a + b
}

/// `a (m x k) * b (k x n)`.
pub(crate) fn matmul_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            axpy(orow, av, b.row(l));
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a (m x p) * b^T (p x q)` where `b` is stored `q x p`.
pub(crate) fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, p, q) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(p, b.cols());
    let mut out = vec![T::ZERO; m * q];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * q..(i + 1) * q];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, b.row(j));
        }
    }
    Tensor {
        shape: vec![m, q],
        data: out,
    }
}

/// `a^T (k x m) * b (m x n)` where `a` is stored `m x k`.
pub(crate) fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(m, b.rows());
    let mut out = vec![T::ZERO; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (l, &av) in arow.iter().enumerate() {
            axpy(&mut out[l * n..(l + 1) * n], av, brow);
        }
    }
    Tensor {
        shape: vec![k, n],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_buffer() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn matmul_kernels_agree_on_small_case() {
        let a = Tensor::matrix(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let nn = matmul_nn(&a, &b);
        assert_eq!(nn.data(), &[58.0, 64.0, 139.0, 154.0]);
        let nt = matmul_nt(&a, &b.transposed());
        assert_eq!(nt.data(), nn.data());
        let tn = matmul_tn(&a.transposed(), &b);
        assert_eq!(tn.data(), nn.data());
    }

    #[test]
    fn dot_matches_naive_order_independent_tolerance() {
        let x: Vec<f64> = (0..37).map(|i| (i as f64) * 0.1 - 1.3).collect();
        let y: Vec<f64> = (0..37).map(|i| 0.7 - (i as f64) * 0.05).collect();
        let naive: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((dot(&x, &y) - naive).abs() < 1e-12);
    }

    #[test]
    fn zero_extent_tensors_are_legal() {
        let t = Tensor::<f32>::zeros(vec![0, 16]);
        assert_eq!(t.numel(), 0);
        assert_eq!(t.rows(), 0);
    }
}
