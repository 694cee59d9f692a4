//! Dense n-dimensional arrays with a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is a plain value type. Differentiable computation happens on a
//! [`Tape`]: leaves are copied in, every op appends a node, and
//! [`Tape::backward`] walks the nodes once in reverse. Learnable weights live
//! in a [`ParamStore`] and receive accumulated gradients after each backward
//! pass.

mod gather;
mod gradcheck;
mod io;
mod params;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gather::RowMap;
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use io::{read_named, write_named, NamedTensor, NamedValues};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

/// Scalar precision of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Width in bytes, as recorded in the serialized form.
    const BYTES: u8;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn push_le(self, out: &mut Vec<u8>);

    fn from_le(bytes: &[u8]) -> Self;

    /// `C += A·B` for an `m×k` by `k×n` product with arbitrary row/column
    /// strides.
    ///
    /// # Safety
    /// Every index reached through the strides must lie inside the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

impl Real for f32 {
    const BYTES: u8 = 4;

    fn push_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }

    unsafe fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        (rsa, csa): (isize, isize),
        b: &[Self],
        (rsb, csb): (isize, isize),
        c: &mut [Self],
        (rsc, csc): (isize, isize),
    ) {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), rsc, csc,
        );
    }
}

impl Real for f64 {
    const BYTES: u8 = 8;

    fn push_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }

    unsafe fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        (rsa, csa): (isize, isize),
        b: &[Self],
        (rsb, csb): (isize, isize),
        c: &mut [Self],
        (rsc, csc): (isize, isize),
    ) {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), rsc, csc,
        );
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }
}

/// `C += A·B` for `A[m×k]`, `B[k×n]`.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m * n * k == 0 {
        return;
    }
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: the row-major extents were checked above.
    unsafe { T::gemm_strided(m, k, n, a, (k_, 1), b, (n_, 1), c, (n_, 1)) }
}

/// `C += A·Bᵀ` for `A[m×k]`, `B[n×k]`.
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m * n * k == 0 {
        return;
    }
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: B is read as its transpose through swapped strides.
    unsafe { T::gemm_strided(m, k, n, a, (k_, 1), b, (1, k_), c, (n_, 1)) }
}

/// `C += Aᵀ·B` for `A[m×k]`, `B[m×n]`, result `[k×n]`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    if m * n * k == 0 {
        return;
    }
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: A is read as its transpose through swapped strides.
    unsafe { T::gemm_strided(k, m, n, a, (1, k_), b, (n_, 1), c, (n_, 1)) }
}

/// Numerically stable softmax of one row with an optional validity mask.
/// Masked entries get weight zero; a fully masked row becomes all zeros.
pub(crate) fn softmax_row<T: Real>(x: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let valid = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if valid(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut total = T::zero();
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        *o = if valid(j) { (v - max).exp() } else { T::zero() };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f32>::zeros(&[3, 4]).len(), 12);
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::<f64>::zeros(&[2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 2.5][..]));
        t.zero_grad();
        assert!(t.grad.is_none());
    }

    #[test]
    fn softmax_row_examples() {
        let mut out = [0.0f64; 3];
        softmax_row(&[0.0, 0.0, 0.0], None, &mut out);
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let mut out = [0.0f64; 2];
        softmax_row(&[2f64.ln(), 0.0], None, &mut out);
        assert!((out[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((out[1] - 1.0 / 3.0).abs() < 1e-12);
        softmax_row(&[1000.0, 1000.0], None, &mut out);
        assert_eq!(out, [0.5, 0.5]);
        softmax_row(&[1.0, 5.0], Some(&[true, false]), &mut out);
        assert_eq!(out, [1.0, 0.0]);
        softmax_row(&[1.0, 5.0], Some(&[false, false]), &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }
}
