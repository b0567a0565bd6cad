use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Windowed pooling, no padding, floor-division output size.
///
/// For max pooling the flat input offset of each window winner is
/// returned so the gradient can be routed back.
pub fn pool2d<T: Scalar>(
    input: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    let (n, c, h, w) = input.dims4()?;
    if k == 0 || stride == 0 {
        return Err(shape_err!("pool kernel and stride must be >= 1"));
    }
    if k > h || k > w {
        return Err(shape_err!(
            "pool window {} exceeds spatial extent {}x{}",
            k,
            h,
            w
        ));
    }
    let out_h = (h - k) / stride + 1;
    let out_w = (w - k) / stride + 1;
    let mut data = vec![T::zero(); n * c * out_h * out_w];
    let mut winners = if kind == PoolKind::Max {
        Some(vec![0usize; n * c * out_h * out_w])
    } else {
        None
    };
    for plane in 0..n * c {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        for oh in 0..out_h {
            for ow in 0..out_w {
                let slot = (plane * out_h + oh) * out_w + ow;
                match kind {
                    PoolKind::Max => {
                        let mut best = src[oh * stride * w + ow * stride];
                        let mut best_off = oh * stride * w + ow * stride;
                        for kh in 0..k {
                            for kw in 0..k {
                                let off = (oh * stride + kh) * w + ow * stride + kw;
                                let v = src[off];
                                // NaN poisons the window rather than losing
                                // to every comparison.
                                if v != v {
                                    best = v;
                                    best_off = off;
                                } else if v > best {
                                    best = v;
                                    best_off = off;
                                }
                            }
                        }
                        data[slot] = best;
                        winners.as_mut().unwrap()[slot] = plane * h * w + best_off;
                    }
                    PoolKind::Avg => {
                        let mut acc = T::zero();
                        for kh in 0..k {
                            for kw in 0..k {
                                acc += src[(oh * stride + kh) * w + ow * stride + kw];
                            }
                        }
                        data[slot] = acc / T::from_f64((k * k) as f64);
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, c, out_h, out_w], data)?,
        winners,
    ))
}

pub fn pool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    kind: PoolKind,
    k: usize,
    stride: usize,
    winners: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let mut grad = Tensor::<T>::zeros(input_shape);
    match kind {
        PoolKind::Max => {
            let winners = winners.expect("max pool backward needs winner offsets");
            for (g, &off) in grad_out.data().iter().zip(winners.iter()) {
                grad.data_mut()[off] += *g;
            }
        }
        PoolKind::Avg => {
            let (n, c, h, w) = (
                input_shape[0],
                input_shape[1],
                input_shape[2],
                input_shape[3],
            );
            let out_h = (h - k) / stride + 1;
            let out_w = (w - k) / stride + 1;
            let share = T::from_f64(1.0 / (k * k) as f64);
            for plane in 0..n * c {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let g = grad_out.data()[(plane * out_h + oh) * out_w + ow] * share;
                        for kh in 0..k {
                            for kw in 0..k {
                                let off =
                                    plane * h * w + (oh * stride + kh) * w + ow * stride + kw;
                                grad.data_mut()[off] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Floor-partition boundaries for adaptive pooling: bin `b` of `bins`
/// covers `[floor(b*extent/bins), floor((b+1)*extent/bins))`.
pub fn bin_bounds(extent: usize, bins: usize, b: usize) -> (usize, usize) {
    (b * extent / bins, (b + 1) * extent / bins)
}

/// Adaptive average pooling to a `bins x bins` grid. Every input pixel
/// belongs to exactly one window.
pub fn avg_pool_to_bins<T: Scalar>(input: &Tensor<T>, bins: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if bins == 0 || bins > h || bins > w {
        return Err(shape_err!(
            "bins {} out of range for {}x{} feature map",
            bins,
            h,
            w
        ));
    }
    let mut data = vec![T::zero(); n * c * bins * bins];
    for plane in 0..n * c {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        for by in 0..bins {
            let (y0, y1) = bin_bounds(h, bins, by);
            for bx in 0..bins {
                let (x0, x1) = bin_bounds(w, bins, bx);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += src[y * w + x];
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                data[(plane * bins + by) * bins + bx] = acc / T::from_f64(count);
            }
        }
    }
    Tensor::from_vec(&[n, c, bins, bins], data)
}

pub fn avg_pool_to_bins_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    bins: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let mut grad = Tensor::<T>::zeros(input_shape);
    for plane in 0..n * c {
        for by in 0..bins {
            let (y0, y1) = bin_bounds(h, bins, by);
            for bx in 0..bins {
                let (x0, x1) = bin_bounds(w, bins, bx);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let g = grad_out.data()[(plane * bins + by) * bins + bx]
                    / T::from_f64(count);
                for y in y0..y1 {
                    for x in x0..x1 {
                        grad.data_mut()[plane * h * w + y * w + x] += g;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Per-channel spatial mean: `[N,C,H,W] -> [N,C,1,1]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let mut data = vec![T::zero(); n * c];
    for (plane, slot) in data.iter_mut().enumerate() {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        let mut acc = T::zero();
        for &v in src {
            acc += v;
        }
        *slot = acc / T::from_f64((h * w) as f64);
    }
    Tensor::from_vec(&[n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let share = T::from_f64(1.0 / (h * w) as f64);
    let mut grad = Tensor::<T>::zeros(input_shape);
    for (plane, &g) in grad_out.data().iter().enumerate() {
        let v = g * share;
        for slot in grad.data_mut()[plane * h * w..(plane + 1) * h * w].iter_mut() {
            *slot = v;
        }
    }
    Ok(grad)
}
