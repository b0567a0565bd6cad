use rayon::prelude::*;

use crate::error::{shape_err, usage_err, Result};
use crate::ops::linalg::{mm_kernel, MatLayout};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn unit() -> Self {
        ConvSpec {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }

    pub fn same(kernel: usize) -> Self {
        ConvSpec {
            stride: 1,
            pad: (kernel - 1) / 2,
            dilation: 1,
        }
    }

    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let effective = self
            .dilation
            .checked_mul(kernel - 1)
            .and_then(|v| v.checked_add(1))
            .ok_or_else(|| usage_err!("kernel extent overflows"))?;
        let padded = input + 2 * self.pad;
        if self.stride == 0 || self.dilation == 0 || kernel == 0 {
            return Err(usage_err!("stride, dilation and kernel must be >= 1"));
        }
        if padded < effective {
            return Err(shape_err!(
                "input extent {} with pad {} is smaller than dilated kernel extent {}",
                input,
                self.pad,
                effective
            ));
        }
        Ok((padded - effective) / self.stride + 1)
    }
}

/// Unfold input patches into a `[Cin*k*k, H'*W']` matrix for one sample.
fn im2col<T: Scalar>(
    x: &[T],
    _c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    out_h: usize,
    out_w: usize,
    cols: &mut [T],
) {
    let plane = h * w;
    let n_out = out_h * out_w;
    let fill = |row: usize, dst: &mut [T]| {
        let ci = row / (k * k);
        let kh = (row / k) % k;
        let kw = row % k;
        let src_plane = &x[ci * plane..(ci + 1) * plane];
        for oh in 0..out_h {
            let ih = (oh * spec.stride + kh * spec.dilation) as isize - spec.pad as isize;
            let dst_row = &mut dst[oh * out_w..(oh + 1) * out_w];
            if ih < 0 || ih as usize >= h {
                for v in dst_row.iter_mut() {
                    *v = T::zero();
                }
                continue;
            }
            let src_row = &src_plane[ih as usize * w..(ih as usize + 1) * w];
            for (ow, v) in dst_row.iter_mut().enumerate() {
                let iw = (ow * spec.stride + kw * spec.dilation) as isize - spec.pad as isize;
                *v = if iw < 0 || iw as usize >= w {
                    T::zero()
                } else {
                    src_row[iw as usize]
                };
            }
        }
    };
    if cols.len() >= 1 << 15 {
        cols.par_chunks_mut(n_out)
            .enumerate()
            .for_each(|(row, dst)| fill(row, dst));
    } else {
        cols.chunks_mut(n_out)
            .enumerate()
            .for_each(|(row, dst)| fill(row, dst));
    }
}

/// Fold a `[Cin*k*k, H'*W']` patch matrix back onto the input plane,
/// accumulating overlaps. Transpose of [`im2col`].
fn col2im<T: Scalar>(
    cols: &[T],
    _c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    out_h: usize,
    out_w: usize,
    x_grad: &mut [T],
) {
    let plane = h * w;
    let n_out = out_h * out_w;
    // Each input channel owns a disjoint output slice, so channels can run in parallel.
    let fold = |ci: usize, dst_plane: &mut [T]| {
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ci * k + kh) * k + kw;
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oh in 0..out_h {
                        let ih =
                            (oh * spec.stride + kh * spec.dilation) as isize - spec.pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        let dst_row = &mut dst_plane[ih as usize * w..(ih as usize + 1) * w];
                        for ow in 0..out_w {
                            let iw = (ow * spec.stride + kw * spec.dilation) as isize
                                - spec.pad as isize;
                            if iw < 0 || iw as usize >= w {
                                continue;
                            }
                            dst_row[iw as usize] += src[oh * out_w + ow];
                        }
                    }
                }
            }
    };
    if x_grad.len() >= 1 << 15 {
        x_grad
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(ci, dst_plane)| fold(ci, dst_plane));
    } else {
        x_grad
            .chunks_mut(plane)
            .enumerate()
            .for_each(|(ci, dst_plane)| fold(ci, dst_plane));
    }
}

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c_in, h, w) = input.dims4()?;
    let (c_out, c_in_w, kh, kw) = weight.dims4()?;
    if kh != kw {
        return Err(shape_err!("only square kernels are supported, got {}x{}", kh, kw));
    }
    if c_in != c_in_w {
        return Err(shape_err!(
            "input channels {} do not match weight channels {}",
            c_in,
            c_in_w
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err!(
                "bias shape {:?} does not match {} output channels",
                b.shape(),
                c_out
            ));
        }
    }
    let out_h = spec.out_extent(h, kh)?;
    let out_w = spec.out_extent(w, kh)?;
    Ok((n, c_in, h, w, c_out, kh, out_h, out_w))
}

/// 2-D convolution (cross-correlation), zero padding.
///
/// `input` `[N,Cin,H,W]`, `weight` `[Cout,Cin,k,k]`, optional `bias` `[Cout]`.
/// Output extent is `floor((H + 2*pad - dilation*(k-1) - 1)/stride) + 1`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let (n, c_in, h, w, c_out, k, out_h, out_w) = check_conv_shapes(input, weight, bias, spec)?;
    let patch = c_in * k * k;
    let n_out = out_h * out_w;
    let mut out = vec![T::zero(); n * c_out * n_out];
    let mut cols = vec![T::zero(); patch * n_out];
    for sample in 0..n {
        let x = &input.data()[sample * c_in * h * w..(sample + 1) * c_in * h * w];
        im2col(x, c_in, h, w, k, spec, out_h, out_w, &mut cols);
        let dst = &mut out[sample * c_out * n_out..(sample + 1) * c_out * n_out];
        mm_kernel(weight.data(), &cols, c_out, patch, n_out, MatLayout::NN, dst);
    }
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(n_out).enumerate() {
            let bv = b.data()[i % c_out];
            for v in chunk.iter_mut() {
                *v += bv;
            }
        }
    }
    Tensor::from_vec(&[n, c_out, out_h, out_w], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    spec: ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, c_in, h, w, c_out, k, out_h, out_w) = check_conv_shapes(input, weight, None, spec)?;
    if grad_out.shape() != [n, c_out, out_h, out_w] {
        return Err(shape_err!(
            "grad shape {:?} does not match conv output [{},{},{},{}]",
            grad_out.shape(),
            n,
            c_out,
            out_h,
            out_w
        ));
    }
    let patch = c_in * k * k;
    let n_out = out_h * out_w;

    let mut grad_input = vec![T::zero(); n * c_in * h * w];
    let mut grad_weight = vec![T::zero(); c_out * patch];
    let mut cols = vec![T::zero(); patch * n_out];
    let mut col_grad = vec![T::zero(); patch * n_out];
    for sample in 0..n {
        let x = &input.data()[sample * c_in * h * w..(sample + 1) * c_in * h * w];
        let g = &grad_out.data()[sample * c_out * n_out..(sample + 1) * c_out * n_out];
        // dW += g · colsᵀ
        im2col(x, c_in, h, w, k, spec, out_h, out_w, &mut cols);
        mm_kernel(g, &cols, c_out, n_out, patch, MatLayout::NT, &mut grad_weight);
        // dcols = Wᵀ · g, folded back onto the input
        for v in col_grad.iter_mut() {
            *v = T::zero();
        }
        mm_kernel(
            weight.data(),
            g,
            patch,
            c_out,
            n_out,
            MatLayout::TN,
            &mut col_grad,
        );
        col2im(
            &col_grad,
            c_in,
            h,
            w,
            k,
            spec,
            out_h,
            out_w,
            &mut grad_input[sample * c_in * h * w..(sample + 1) * c_in * h * w],
        );
    }

    let grad_bias = if has_bias {
        let mut gb = vec![T::zero(); c_out];
        for sample in 0..n {
            for (co, slot) in gb.iter_mut().enumerate() {
                let base = (sample * c_out + co) * n_out;
                for i in 0..n_out {
                    *slot += grad_out.data()[base + i];
                }
            }
        }
        Some(Tensor::from_vec(&[c_out], gb)?)
    } else {
        None
    };

    Ok((
        Tensor::from_vec(&[n, c_in, h, w], grad_input)?,
        Tensor::from_vec(weight.shape(), grad_weight)?,
        grad_bias,
    ))
}
