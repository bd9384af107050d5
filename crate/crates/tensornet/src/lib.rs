//! A minimal deep-learning engine: dense NCHW tensors, the layers needed by
//! a pix2pix-style U-net and discriminator with hand-written backward passes,
//! L1 and binary cross-entropy losses, and Adam.
//!
//! Everything is generic over [`Scalar`] so the same layers run in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod activation;
pub mod archive;
mod conv;
mod gemm;
pub mod gradcheck;
mod layer;
mod loss;
mod norm;
mod optim;
mod tensor;

pub use activation::{LeakyRelu, Relu, Sigmoid, Tanh};
pub use conv::{Conv2d, ConvTranspose2d};
pub use gemm::gemm;
pub use layer::{Layer, LayerSpec, Sequential};
pub use loss::{bce_loss, l1_loss};
pub use norm::{BatchNorm2d, Dropout};
pub use optim::{Adam, AdamConfig};
pub use tensor::{Param, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected}, got {actual:?}")]
    Shape { expected: String, actual: Vec<usize> },
    #[error("{0}: backward called without a matching forward")]
    StaleCache(&'static str),
    #[error("batch norm needs at least 2 values per channel in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Element type of tensors.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + std::iter::Sum + Default + std::fmt::Debug + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite cast")
    }
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}
