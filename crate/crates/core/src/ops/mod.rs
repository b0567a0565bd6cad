//! Forward numeric kernels and their hand-derived backward rules.
//!
//! Everything here is a pure function from tensors to tensors; the
//! autodiff tape composes these into differentiable graphs.

pub mod activation;
pub mod conv;
pub mod linalg;
pub mod norm;
pub mod pool;
pub mod resize;

pub use activation::{relu, sigmoid, softmax};
pub use conv::{conv2d, ConvSpec};
pub use linalg::{add, bmm, concat, matmul, mul, permute, reduce, scale, sub, ReduceKind};
pub use norm::{batchnorm2d_eval, batchnorm2d_train, BN_EPS, BN_MOMENTUM};
pub use pool::{avg_pool_to_bins, global_avg_pool, pool2d, PoolKind};
pub use resize::bilinear_upsample;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Elementwise multiply with a gate broadcast over size-1 axes.
///
/// `gate` is either a one-element tensor (global scale) or a 4-D tensor
/// whose axes each match `x` or are 1 — this covers per-channel gates
/// `[N,C,1,1]`, per-location gates `[N,1,H,W]` and learned scalars.
pub fn mul_bcast<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    if gate.numel() == 1 {
        let g = gate.data()[0];
        return Ok(x.map(|v| v * g));
    }
    let (n, c, h, w) = x.dims4()?;
    let (gn, gc, gh, gw) = gate.dims4()?;
    for (xs, gs) in [(n, gn), (c, gc), (h, gh), (w, gw)] {
        if gs != xs && gs != 1 {
            return Err(shape_err!(
                "gate {:?} does not broadcast over {:?}",
                gate.shape(),
                x.shape()
            ));
        }
    }
    let mut data = vec![T::zero(); x.numel()];
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let xi = ((s * c + ch) * h + y) * w + xx;
                    let gi = (((s % gn) * gc + ch % gc) * gh + y % gh) * gw + xx % gw;
                    data[xi] = x.data()[xi] * gate.data()[gi];
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), data)
}

/// Gradients of [`mul_bcast`]: the gate gradient sums over broadcast axes.
pub fn mul_bcast_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    gate: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if gate.numel() == 1 {
        let g = gate.data()[0];
        let grad_x = grad_out.map(|v| v * g);
        let mut acc = T::zero();
        for (go, xv) in grad_out.data().iter().zip(x.data()) {
            acc += *go * *xv;
        }
        let mut grad_gate = Tensor::<T>::zeros(gate.shape());
        grad_gate.data_mut()[0] = acc;
        return Ok((grad_x, grad_gate));
    }
    let (n, c, h, w) = x.dims4()?;
    let (gn, gc, gh, gw) = gate.dims4()?;
    let mut grad_x = vec![T::zero(); x.numel()];
    let mut grad_gate = Tensor::<T>::zeros(gate.shape());
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let xi = ((s * c + ch) * h + y) * w + xx;
                    let gi = (((s % gn) * gc + ch % gc) * gh + y % gh) * gw + xx % gw;
                    let go = grad_out.data()[xi];
                    grad_x[xi] = go * gate.data()[gi];
                    grad_gate.data_mut()[gi] += go * x.data()[xi];
                }
            }
        }
    }
    Ok((Tensor::from_vec(x.shape(), grad_x)?, grad_gate))
}
