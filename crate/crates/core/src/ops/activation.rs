use crate::error::{usage_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    // max(NaN, 0) is 0 under IEEE max semantics; keep NaN visible so a
    // poisoned forward pass reaches the loss and trips the abort guard.
    x.map(|v| if v != v { v } else { v.maxv(T::zero()) })
}

/// grad * 1[x > 0]
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip(x, |g, v| if v > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// grad * s * (1 - s), expressed in the already-computed output `s`.
pub fn sigmoid_backward<T: Scalar>(grad_out: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip(s, |g, sv| g * sv * (T::one() - sv))
}

/// Softmax along `axis` with max-subtraction for stability.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let rank = x.rank();
    if axis >= rank {
        return Err(usage_err!("softmax axis {} out of range for rank {}", axis, rank));
    }
    let len_axis = x.shape()[axis];
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut data = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let mut max = x.data()[o * len_axis * inner + i];
            for k in 1..len_axis {
                let v = x.data()[(o * len_axis + k) * inner + i];
                if v > max {
                    max = v;
                }
            }
            let mut total = T::zero();
            for k in 0..len_axis {
                let e = (x.data()[(o * len_axis + k) * inner + i] - max).exp();
                data[(o * len_axis + k) * inner + i] = e;
                total += e;
            }
            for k in 0..len_axis {
                let slot = (o * len_axis + k) * inner + i;
                data[slot] = data[slot] / total;
            }
        }
    }
    Tensor::from_vec(x.shape(), data)
}

/// grad_x = s .* (grad - sum(grad .* s, axis)), with `s` the softmax output.
pub fn softmax_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    s: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    let len_axis = s.shape()[axis];
    let outer: usize = s.shape()[..axis].iter().product();
    let inner: usize = s.shape()[axis + 1..].iter().product();
    let mut data = vec![T::zero(); s.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let mut dot = T::zero();
            for k in 0..len_axis {
                let slot = (o * len_axis + k) * inner + i;
                dot += grad_out.data()[slot] * s.data()[slot];
            }
            for k in 0..len_axis {
                let slot = (o * len_axis + k) * inner + i;
                data[slot] = s.data()[slot] * (grad_out.data()[slot] - dot);
            }
        }
    }
    Tensor::from_vec(s.shape(), data)
}
