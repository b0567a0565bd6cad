use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source coordinate and lerp weights for one output index under
/// half-pixel-center alignment, clamped to the valid range.
fn sample_coords(dst: usize, in_extent: usize, out_extent: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) * in_extent as f64 / out_extent as f64 - 0.5;
    let src = src.clamp(0.0, (in_extent - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_extent - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear interpolation with half-pixel-center alignment.
///
/// Scale 1 is an exact identity and constants are preserved at any scale.
pub fn bilinear_upsample<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("upsample target must be at least 1x1"));
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let rows: Vec<(usize, usize, f64)> = (0..out_h).map(|y| sample_coords(y, h, out_h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|x| sample_coords(x, w, out_w)).collect();
    let mut data = vec![T::zero(); n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut data[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (y, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, wx)) in cols.iter().enumerate() {
                let tl = src[y0 * w + x0].to_f64();
                let tr = src[y0 * w + x1].to_f64();
                let bl = src[y1 * w + x0].to_f64();
                let br = src[y1 * w + x1].to_f64();
                let top = tl + (tr - tl) * wx;
                let bot = bl + (br - bl) * wx;
                dst[y * out_w + x] = T::from_f64(top + (bot - top) * wy);
            }
        }
    }
    Tensor::from_vec(&[n, c, out_h, out_w], data)
}

/// Transpose of [`bilinear_upsample`]: scatter each output gradient onto
/// its four source pixels with the interpolation weights.
pub fn bilinear_upsample_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (gn, gc, out_h, out_w) = grad_out.dims4()?;
    if gn != n || gc != c {
        return Err(shape_err!(
            "upsample gradient {:?} does not match input {:?}",
            grad_out.shape(),
            input_shape
        ));
    }
    if out_h == h && out_w == w {
        return Ok(grad_out.clone());
    }
    let rows: Vec<(usize, usize, f64)> = (0..out_h).map(|y| sample_coords(y, h, out_h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|x| sample_coords(x, w, out_w)).collect();
    let mut grad = Tensor::<T>::zeros(input_shape);
    for plane in 0..n * c {
        let g = &grad_out.data()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let dst = &mut grad.data_mut()[plane * h * w..(plane + 1) * h * w];
        for (y, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, wx)) in cols.iter().enumerate() {
                let gv = g[y * out_w + x].to_f64();
                dst[y0 * w + x0] += T::from_f64(gv * (1.0 - wy) * (1.0 - wx));
                dst[y0 * w + x1] += T::from_f64(gv * (1.0 - wy) * wx);
                dst[y1 * w + x0] += T::from_f64(gv * wy * (1.0 - wx));
                dst[y1 * w + x1] += T::from_f64(gv * wy * wx);
            }
        }
    }
    Ok(grad)
}
