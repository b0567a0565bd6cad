//! Gaussian density-map ground truth, counting, the training loss, and
//! the count-error metrics.

use crate::autodiff::{NodeId, Tape};
use crate::error::{data_err, usage_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Head-point annotations in pixel coordinates, sub-pixel allowed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    points: Vec<(f64, f64)>,
}

impl PointSet {
    pub fn empty() -> Self {
        PointSet { points: Vec::new() }
    }

    /// Half-open bounds: `0 <= x < w`, `0 <= y < h`. The first offending
    /// point is reported.
    pub fn validated(points: Vec<(f64, f64)>, w: usize, h: usize) -> Result<Self> {
        for (i, &(x, y)) in points.iter().enumerate() {
            if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                return Err(data_err!(
                    "point {i} at ({x}, {y}) lies outside the {w}x{h} image"
                ));
            }
        }
        Ok(PointSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.iter().copied()
    }
}

/// Non-negative density field whose sum is the (fractional) object count.
/// `scale` is the resolution divisor relative to the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub values: Tensor<f64>,
    pub scale: u32,
}

impl DensityMap {
    pub fn new(values: Tensor<f64>, scale: u32) -> Result<Self> {
        if values.rank() != 3 || values.shape()[0] != 1 {
            return Err(usage_err!(
                "density map expects [1,h,w] values, got {:?}",
                values.shape()
            ));
        }
        Ok(DensityMap { values, scale })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Sum of isotropic Gaussians N(p; P, sigma^2 I) over the pixel grid,
/// truncated at a 4-sigma radius per point. Mass clipped by the image
/// border is not renormalized.
pub fn make_density_map(points: &PointSet, h: usize, w: usize, sigma: f64) -> Result<DensityMap> {
    if sigma <= 0.0 {
        return Err(usage_err!("sigma must be positive, got {sigma}"));
    }
    let mut values = Tensor::<f64>::zeros(&[1, h, w]);
    let radius = 4.0 * sigma;
    let r2 = radius * radius;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let inv_two_s2 = 1.0 / (2.0 * sigma * sigma);
    for (px, py) in points.iter() {
        let y0 = ((py - radius).ceil().max(0.0)) as usize;
        let y1 = ((py + radius).floor().min((h - 1) as f64)) as usize;
        let x0 = ((px - radius).ceil().max(0.0)) as usize;
        let x1 = ((px + radius).floor().min((w - 1) as f64)) as usize;
        for y in y0..=y1 {
            let dy = y as f64 - py;
            for x in x0..=x1 {
                let dx = x as f64 - px;
                let d2 = dx * dx + dy * dy;
                if d2 > r2 {
                    continue;
                }
                values.data_mut()[y * w + x] += norm * (-d2 * inv_two_s2).exp();
            }
        }
    }
    DensityMap::new(values, 1)
}

/// The count is the integral (sum) of the density field.
pub fn count(map: &DensityMap) -> f64 {
    map.values.sum()
}

/// Block-sum reduction: each output pixel is the sum of its
/// `factor x factor` block, so total mass is preserved exactly.
pub fn downsample_count_preserving(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 {
        return Err(usage_err!("downsample factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let (h, w) = (map.height(), map.width());
    if h % factor != 0 || w % factor != 0 {
        return Err(usage_err!(
            "map {h}x{w} is not divisible by downsample factor {factor}"
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut values = Tensor::<f64>::zeros(&[1, oh, ow]);
    for y in 0..h {
        for x in 0..w {
            values.data_mut()[(y / factor) * ow + x / factor] += map.values.data()[y * w + x];
        }
    }
    DensityMap::new(values, map.scale * factor as u32)
}

/// Differentiable Euclidean loss `(1/2N) * sum((gt - pred)^2)` between
/// same-shape stacked density maps; `batch` is N.
pub fn euclidean_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    gt: NodeId,
    batch: usize,
) -> Result<NodeId> {
    if tape.value(pred).shape() != tape.value(gt).shape() {
        return Err(usage_err!(
            "loss shapes differ: {:?} vs {:?}",
            tape.value(pred).shape(),
            tape.value(gt).shape()
        ));
    }
    if batch == 0 {
        return Err(usage_err!("batch size must be >= 1"));
    }
    let diff = tape.sub(gt, pred)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq)?;
    tape.scale(total, 1.0 / (2.0 * batch as f64))
}

/// Mean absolute error and rooted mean squared error over per-image counts.
pub fn mae_mse(truth: &[f64], predicted: &[f64]) -> Result<(f64, f64)> {
    if truth.is_empty() || truth.len() != predicted.len() {
        return Err(usage_err!(
            "count lists must be equal-length and non-empty ({} vs {})",
            truth.len(),
            predicted.len()
        ));
    }
    let n = truth.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (y, yh) in truth.iter().zip(predicted.iter()) {
        let d = y - yh;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    /// Full-grid separable discrete Gaussian sum, independent of the
    /// truncated accumulation in `make_density_map`.
    fn separable_grid_mass(px: f64, py: f64, h: usize, w: usize, sigma: f64) -> f64 {
        let g1 = |t: f64| (-t * t / (2.0 * sigma * sigma)).exp()
            / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let sx: f64 = (0..w).map(|x| g1(x as f64 - px)).sum();
        let sy: f64 = (0..h).map(|y| g1(y as f64 - py)).sum();
        sx * sy
    }

    #[test]
    fn empty_point_set_gives_zero_map() {
        let map = make_density_map(&PointSet::empty(), 32, 32, 4.0).unwrap();
        assert_eq!(count(&map), 0.0);
        assert!(map.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_point_has_unit_mass() {
        let points = PointSet::validated(vec![(32.0, 32.0)], 64, 64).unwrap();
        let map = make_density_map(&points, 64, 64, 4.0).unwrap();
        let oracle = separable_grid_mass(32.0, 32.0, 64, 64, 4.0);
        assert!((count(&map) - oracle).abs() < 1e-3);
        assert!((count(&map) - 1.0).abs() < 1e-3, "sum = {}", count(&map));
    }

    #[test]
    fn corner_point_keeps_one_quadrant_of_mass() {
        let points = PointSet::validated(vec![(0.0, 0.0)], 64, 64).unwrap();
        let map = make_density_map(&points, 64, 64, 4.0).unwrap();
        let oracle = separable_grid_mass(0.0, 0.0, 64, 64, 4.0);
        assert!((count(&map) - oracle).abs() < 1e-3);
        // Three quadrants clip away; the continuous quadrant mass is 0.25,
        // and integer-grid sampling adds the half-counted boundary row and
        // column on top ((1 + g(0))/2 per axis, ~0.30 total at sigma 4).
        let boundary = |s: f64| 0.5 + 0.5 / (s * (2.0 * std::f64::consts::PI).sqrt());
        let expected = boundary(4.0) * boundary(4.0);
        assert!((count(&map) - expected).abs() < 1e-3, "sum = {}", count(&map));
        assert!((count(&map) - 0.25).abs() < 0.06, "sum = {}", count(&map));
    }

    #[test]
    fn interior_points_count_within_one_percent() {
        let sigma = 4.0;
        let coords: Vec<(f64, f64)> = (0..7)
            .map(|i| (16.0 + 4.3 * i as f64, 40.0 - 3.1 * i as f64))
            .collect();
        let points = PointSet::validated(coords, 64, 64).unwrap();
        let map = make_density_map(&points, 64, 64, sigma).unwrap();
        let k = points.len() as f64;
        assert!((count(&map) - k).abs() / k < 0.01);
    }

    #[test]
    fn density_is_additive_over_point_sets() {
        let a = PointSet::validated(vec![(10.0, 12.0)], 32, 32).unwrap();
        let b = PointSet::validated(vec![(20.5, 8.25)], 32, 32).unwrap();
        let both = PointSet::validated(vec![(10.0, 12.0), (20.5, 8.25)], 32, 32).unwrap();
        let ma = make_density_map(&a, 32, 32, 3.0).unwrap();
        let mb = make_density_map(&b, 32, 32, 3.0).unwrap();
        let mboth = make_density_map(&both, 32, 32, 3.0).unwrap();
        assert!((count(&mboth) - (count(&ma) + count(&mb))).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_points_are_rejected() {
        assert!(PointSet::validated(vec![(32.0, 0.0)], 32, 32).is_err());
        assert!(PointSet::validated(vec![(0.0, -0.1)], 32, 32).is_err());
        assert!(PointSet::validated(vec![(31.999, 31.999)], 32, 32).is_ok());
    }

    #[test]
    fn downsample_identity_and_block_sum() {
        let map = DensityMap::new(Tensor::ones(&[1, 4, 4]), 1).unwrap();
        let same = downsample_count_preserving(&map, 1).unwrap();
        assert_eq!(same, map);
        let reduced = downsample_count_preserving(&map, 4).unwrap();
        assert_eq!(reduced.values.data(), &[16.0]);
        assert_eq!(reduced.scale, 4);
    }

    #[test]
    fn downsample_conserves_mass() {
        let values = Tensor::<f64>::from_fn(&[1, 12, 8], |i| ((i as f64) * 0.37).sin().abs());
        let map = DensityMap::new(values, 1).unwrap();
        let reduced = downsample_count_preserving(&map, 4).unwrap();
        assert!((count(&map) - count(&reduced)).abs() < 1e-9);
        assert!(downsample_count_preserving(&map, 5).is_err());
    }

    #[test]
    fn loss_zero_iff_equal_and_closed_form_offset() {
        let gt_val = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| (i as f64) * 0.1);
        let mut tape = Tape::<f64>::new();
        let gt = tape.constant(gt_val.clone());
        let pred_eq = tape.constant(gt_val.clone());
        let loss = euclidean_loss(&mut tape, pred_eq, gt, 1).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);

        let plus_one = tape.constant(gt_val.map(|v| v + 1.0));
        let loss = euclidean_loss(&mut tape, plus_one, gt, 1).unwrap();
        // 16 pixels, each contributing 1/2.
        assert!((tape.value(loss).item().unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_is_pred_minus_gt_over_n() {
        let gt_val = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |i| ((i as f64) * 0.21).cos());
        let pred_val = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |i| ((i as f64) * 0.4).sin());
        let batch = 2usize;

        // Analytic form against the autodiff gradient.
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(pred_val.clone(), true);
        let gt = tape.constant(gt_val.clone());
        let loss = euclidean_loss(&mut tape, pred, gt, batch).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (g, (p, t)) in grads
            .wrt(pred)
            .data()
            .iter()
            .zip(pred_val.data().iter().zip(gt_val.data()))
        {
            assert!((g - (p - t) / batch as f64).abs() < 1e-12);
        }

        // And against central differences.
        let gt_for_check = gt_val.clone();
        let err = grad_check(
            &move |tape, ids| {
                let gt = tape.constant(gt_for_check.clone());
                euclidean_loss(tape, ids[0], gt, batch)
            },
            &[pred_val],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "loss gradcheck error {err}");
    }

    #[test]
    fn metrics_hand_values_and_ordering() {
        let (mae, mse) = mae_mse(&[10.0, 20.0], &[12.0, 17.0]).unwrap();
        assert!((mae - 2.5).abs() < 1e-12);
        assert!((mse - 6.5f64.sqrt()).abs() < 1e-12);

        let (mae0, mse0) = mae_mse(&[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert_eq!((mae0, mse0), (0.0, 0.0));

        assert!(mae_mse(&[], &[]).is_err());
        assert!(mae_mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_never_exceeds_mse() {
        for seed in 0..50u64 {
            let y: Vec<f64> = (0..10)
                .map(|i| (((seed * 31 + i) * 2654435761 % 1000) as f64) / 10.0)
                .collect();
            let yh: Vec<f64> = (0..10)
                .map(|i| (((seed * 17 + i) * 40503 % 1000) as f64) / 10.0)
                .collect();
            let (mae, mse) = mae_mse(&y, &yh).unwrap();
            assert!(mae <= mse + 1e-12, "seed {seed}: {mae} > {mse}");
        }
    }
}
