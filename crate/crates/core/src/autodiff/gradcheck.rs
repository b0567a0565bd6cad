use rayon::prelude::*;

use crate::error::Result;
use crate::tensor::Tensor;

use super::{NodeId, Tape};

pub const GRADCHECK_EPS: f64 = 1e-4;

/// Worst element found by [`grad_check_detailed`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckWorst {
    pub max_rel_err: f64,
    pub tensor: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare reverse-mode gradients against central differences.
///
/// `build` reconstructs the same scalar-valued subgraph from leaf values;
/// it must be deterministic. Returns the maximum over all leaf elements of
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`. 64-bit only — finite
/// differences at 32-bit drown in rounding error.
pub fn grad_check<F>(build: &F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Sync,
{
    grad_check_detailed(build, inputs, eps).map(|w| w.max_rel_err)
}

/// As [`grad_check`], also reporting where the worst disagreement sits.
pub fn grad_check_detailed<F>(
    build: &F,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckWorst>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Sync,
{
    let all = grad_check_all(build, inputs, eps)?;
    Ok(pick_worst(all))
}

fn pick_worst(all: Vec<GradCheckWorst>) -> GradCheckWorst {
    all.into_iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap_or(GradCheckWorst {
            max_rel_err: 0.0,
            tensor: 0,
            element: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
}

fn grad_check_all<F>(
    build: &F,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<Vec<GradCheckWorst>>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Sync,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<NodeId> = values
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let loss = build(&mut tape, &ids)?;
        tape.value(loss).item()
    };

    // Analytic gradients from one recorded pass.
    let mut tape = Tape::<f64>::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.wrt(id)).collect();

    // Every (tensor, element) pair perturbs independently.
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |ei| (ti, ei)))
        .collect();
    let errors: Result<Vec<GradCheckWorst>> = coords
        .par_iter()
        .map_init(
            || inputs.to_vec(),
            |scratch, &(ti, ei)| {
                let original = scratch[ti].data()[ei];
                scratch[ti].data_mut()[ei] = original + eps;
                let plus = eval(scratch)?;
                scratch[ti].data_mut()[ei] = original - eps;
                let minus = eval(scratch)?;
                scratch[ti].data_mut()[ei] = original;
                let fd = (plus - minus) / (2.0 * eps);
                let ad = analytic[ti].data()[ei];
                Ok(GradCheckWorst {
                    max_rel_err: (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8),
                    tensor: ti,
                    element: ei,
                    analytic: ad,
                    numeric: fd,
                })
            },
        )
        .collect();
    errors
}

/// Outcome of [`grad_check_refined`].
pub struct RefinedGradCheck {
    pub worst: GradCheckWorst,
    /// Coordinates whose base-eps oracle was refined.
    pub refined: usize,
}

/// [`grad_check`] with a finer oracle for suspect coordinates.
///
/// Central differences at a fixed eps carry O(eps^2) truncation error,
/// drown in rounding noise along (near-)invariant directions, and go
/// blind where the +/-eps interval straddles a ReLU or max-pool kink;
/// all are failures of the numeric oracle, not of the gradient under
/// test. Coordinates whose relative error at the base eps reaches
/// `suspect_threshold` are re-measured at 4*eps (less rounding noise),
/// eps/4 and eps/16 (less truncation), keeping the best agreement. A
/// genuine backward-rule error stays wrong at every eps (the finite
/// difference converges to the true derivative), so refinement cannot
/// mask one.
pub fn grad_check_refined<F>(
    build: &F,
    inputs: &[Tensor<f64>],
    eps: f64,
    suspect_threshold: f64,
) -> Result<RefinedGradCheck>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Sync,
{
    let mut all = grad_check_all(build, inputs, eps)?;
    let mut refined = 0usize;
    for entry in all.iter_mut() {
        if entry.max_rel_err < suspect_threshold {
            continue;
        }
        refined += 1;
        for finer in [4.0 * eps, eps / 4.0, eps / 16.0] {
            let mut plus = inputs.to_vec();
            plus[entry.tensor].data_mut()[entry.element] += finer;
            let mut minus = inputs.to_vec();
            minus[entry.tensor].data_mut()[entry.element] -= finer;
            let fd = (eval_loss(build, &plus)? - eval_loss(build, &minus)?) / (2.0 * finer);
            let ad = entry.analytic;
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            if rel < entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.numeric = fd;
            }
        }
    }
    Ok(RefinedGradCheck {
        worst: pick_worst(all),
        refined,
    })
}

fn eval_loss<F>(build: &F, values: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Sync,
{
    let mut tape = Tape::<f64>::new();
    let ids: Vec<NodeId> = values
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = build(&mut tape, &ids)?;
    tape.value(loss).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::ConvSpec;

    #[test]
    fn linear_map_is_exact_to_rounding() {
        let x = Tensor::<f64>::from_fn(&[3, 3], |i| (i as f64) * 0.7 - 2.0);
        let err = grad_check(
            &|tape, ids| {
                let s = tape.scale(ids[0], 3.5)?;
                tape.sum_all(s)
            },
            &[x],
            GRADCHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-10, "linear map error {err}");
    }

    #[test]
    fn conv_relu_chain_matches_central_differences() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |i| ((i as f64) * 0.37).sin());
        let w = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |i| ((i as f64) * 0.19).cos() * 0.4);
        let b = Tensor::<f64>::from_fn(&[3], |i| (i as f64) * 0.05 - 0.02);
        let err = grad_check(
            &|tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), ConvSpec::same(3))?;
                let r = tape.relu(y)?;
                tape.sum_all(r)
            },
            &[x, w, b],
            GRADCHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "conv+relu error {err}");
    }

    #[test]
    fn softmax_bmm_chain_matches_central_differences() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| ((i as f64) * 0.23).sin());
        let err = grad_check(
            &|tape, ids| {
                let sim = tape.bmm_nt(ids[0], ids[0])?;
                let att = tape.softmax(sim, 2)?;
                let out = tape.bmm(att, ids[0])?;
                let sq = tape.mul(out, out)?;
                tape.sum_all(sq)
            },
            &[a],
            GRADCHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "attention chain error {err}");
    }

    #[test]
    fn pool_upsample_chain_matches_central_differences() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 6, 6], |i| ((i as f64) * 0.51).cos());
        let err = grad_check(
            &|tape, ids| {
                let p = tape.avg_pool_to_bins(ids[0], 3)?;
                let u = tape.bilinear_upsample(p, 6, 6)?;
                let m = tape.pool2d(u, crate::ops::PoolKind::Max, 2, 2)?;
                let s = tape.sigmoid(m)?;
                tape.sum_all(s)
            },
            &[x],
            GRADCHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "pool/upsample chain error {err}");
    }

    #[test]
    fn batchnorm_train_mode_matches_central_differences() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |i| ((i as f64) * 0.7).sin() * 2.0);
        let gamma = Tensor::<f64>::from_vec(&[2], vec![1.2, 0.7]).unwrap();
        let beta = Tensor::<f64>::from_vec(&[2], vec![0.1, -0.3]).unwrap();
        let rm = Tensor::<f64>::zeros(&[2]);
        let rv = Tensor::<f64>::ones(&[2]);
        // Weighted linear readout: sum(bn(x)^2) is nearly invariant to x
        // (normalization pins the second moment), which starves the check.
        let weights = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |i| ((i % 7) as f64) * 0.4 - 1.0);
        let err = grad_check(
            &|tape, ids| {
                tape.set_train(true);
                let (y, _) = tape.batchnorm2d(
                    ids[0],
                    ids[1],
                    ids[2],
                    &rm,
                    &rv,
                    crate::ops::BN_EPS,
                    crate::ops::BN_MOMENTUM,
                )?;
                let w = tape.constant(weights.clone());
                let weighted = tape.mul(y, w)?;
                tape.sum_all(weighted)
            },
            &[x, gamma, beta],
            GRADCHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "batchnorm error {err}");
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        // A rule that claims d(2x)/dx = 3 must trip the checker.
        let x = Tensor::<f64>::from_fn(&[4], |i| (i as f64) * 0.3 + 0.1);
        let err = grad_check(
            &|tape, ids| {
                let wrong = tape.push_custom(
                    crate::ops::scale(tape.value(ids[0]), 2.0),
                    vec![ids[0]],
                    Box::new(|g, _, _| Ok(vec![crate::ops::scale(g, 3.0)])),
                )?;
                tape.sum_all(wrong)
            },
            &[x],
            GRADCHECK_EPS,
        )
        .unwrap();
        assert!(err > 0.3, "corrupted rule slipped through: {err}");
    }
}
