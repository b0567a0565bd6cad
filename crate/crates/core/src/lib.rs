//! Multi-level attentive crowd counting, end to end and self-contained:
//! dense tensor kernels, reverse-mode automatic differentiation, channel /
//! spatial / triplet attention, multi-scale context pooling, Gaussian
//! density-map supervision, synthetic scene generation, and a desk-scale
//! training and evaluation harness.
//!
//! The crate has no heavyweight numerical dependencies; every kernel and
//! every backward rule is implemented here and verified against finite
//! differences.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod density;
pub mod error;
pub mod harness;
pub mod io;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
