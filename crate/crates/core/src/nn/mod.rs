//! Minimal differentiable-network substrate.
//!
//! Convolutions are expressed as the sparse linear map `b = M a` over the
//! vectorized input; the backward pass left-multiplies by `Mᵀ`. Deconvolution
//! is the learned map `a = M̃ b` where `M̃` has the shape of `Mᵀ`, so its
//! forward pass reuses the convolution's input-gradient kernel and vice versa.
//! [`build_conv_matrix`] materializes `M` explicitly and is used as an
//! independent oracle in tests.

mod activation;
mod adam;
mod conv;
mod dense;
mod gradcheck;
mod init;
mod pool;
mod tensor;

use thiserror::Error;

pub use activation::{relu, relu_grad, softmax, softmax_grad};
pub use adam::AdamState;
pub use conv::{
    build_conv_matrix, conv2d, conv2d_grad, conv2d_output_hw, deconv2d, deconv2d_grad, deconv2d_output_hw, deconv2d_to,
    ConvGrads, ConvSpec,
};
pub use dense::{dense, dense_grad, DenseGrads, DenseParams};
pub use gradcheck::{grad_check, GradCheckReport};
pub use init::{he_normal, SeedStream};
pub use pool::{pool2d, pool2d_grad, unpool2d, unpool2d_grad, PoolMode, PoolRecord};
pub use tensor::Tensor;

pub(crate) use conv::{conv2d_backward_accumulate, deconv2d_backward_accumulate};
pub(crate) use dense::dense_backward_accumulate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Floating-point element type. Training runs on `f32`; oracle and
/// gradient-check tests run the same code paths on `f64`.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64c(v: f64) -> Self;
    fn to_f64c(self) -> f64;

    /// `c += a · b` over strided row/column layouts. Callers guarantee
    /// every addressed element lies inside its slice.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: [usize; 2],
        b: &[Self],
        b_strides: [usize; 2],
        c: &mut [Self],
        c_strides: [usize; 2],
    );
}

macro_rules! gemm_impl {
    ($kernel:path) => {
        fn gemm_acc(
            m: usize,
            k: usize,
            n: usize,
            a: &[Self],
            a_strides: [usize; 2],
            b: &[Self],
            b_strides: [usize; 2],
            c: &mut [Self],
            c_strides: [usize; 2],
        ) {
            let last = |rows: usize, cols: usize, s: [usize; 2]| (rows.max(1) - 1) * s[0] + (cols.max(1) - 1) * s[1];
            assert!(m == 0 || k == 0 || last(m, k, a_strides) < a.len());
            assert!(k == 0 || n == 0 || last(k, n, b_strides) < b.len());
            assert!(m == 0 || n == 0 || last(m, n, c_strides) < c.len());
            // SAFETY: the asserts above bound every offset the kernel reads or writes.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    a_strides[0] as isize,
                    a_strides[1] as isize,
                    b.as_ptr(),
                    b_strides[0] as isize,
                    b_strides[1] as isize,
                    1.0,
                    c.as_mut_ptr(),
                    c_strides[0] as isize,
                    c_strides[1] as isize,
                );
            }
        }
    };
}

/// Dot product with eight independent accumulators so the reduction can
/// vectorize. The summation order is fixed, so results are reproducible.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let pairs = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

impl Scalar for f32 {
    #[inline]
    fn from_f64c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self as f64
    }

    gemm_impl!(matrixmultiply::sgemm);
}

impl Scalar for f64 {
    #[inline]
    fn from_f64c(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64c(self) -> f64 {
        self
    }

    gemm_impl!(matrixmultiply::dgemm);
}
