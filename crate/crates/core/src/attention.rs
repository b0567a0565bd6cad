//! The three attention levels: per-channel gating from globally pooled
//! statistics, per-location gating from channel-pooled statistics, and
//! triplet self-attention over the channel, row and column axes.
//!
//! Functions here are pure graph builders over explicit parameter nodes;
//! the parameter naming schema and store registration live with the model.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::ops::linalg::ReduceKind;
use crate::ops::{ConvSpec, BN_EPS, BN_MOMENTUM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Nodes of one squeeze-excite style channel gate: two 1x1 convolutions
/// around a ReLU bottleneck.
#[derive(Debug, Clone, Copy)]
pub struct ChannelGateIds {
    pub fc1_weight: NodeId,
    pub fc1_bias: NodeId,
    pub fc2_weight: NodeId,
    pub fc2_bias: NodeId,
}

/// `x ⊙ sigmoid(FC2(ReLU(FC1(GAP(x)))))`, the gate broadcast over space.
pub fn channel_gate<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    ids: &ChannelGateIds,
) -> Result<NodeId> {
    let squeezed = tape.global_avg_pool(x)?;
    let h = tape.conv2d(squeezed, ids.fc1_weight, Some(ids.fc1_bias), ConvSpec::unit())?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, ids.fc2_weight, Some(ids.fc2_bias), ConvSpec::unit())?;
    let gate = tape.sigmoid(h)?;
    tape.mul_bcast(x, gate)
}

/// Nodes of one spatial gate: a k x k convolution over the stacked
/// channel-max and channel-mean maps, batch-normalized.
#[derive(Debug, Clone, Copy)]
pub struct SpatialGateIds {
    pub conv_weight: NodeId,
    pub bn_gamma: NodeId,
    pub bn_beta: NodeId,
}

/// `x ⊙ sigmoid(bn(conv([max_c(x); avg_c(x)])))`, gate broadcast over
/// channels. Returns the updated running statistics in train mode.
#[allow(clippy::type_complexity)]
pub fn spatial_gate<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    ids: &SpatialGateIds,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<(NodeId, Option<(Tensor<T>, Tensor<T>)>)> {
    let max_c = tape.reduce(x, 1, ReduceKind::Max)?;
    let avg_c = tape.reduce(x, 1, ReduceKind::Mean)?;
    let stacked = tape.concat(&[max_c, avg_c], 1)?;
    let k = tape.value(ids.conv_weight).shape()[2];
    let conv = tape.conv2d(stacked, ids.conv_weight, None, ConvSpec::same(k))?;
    let (bn, new_running) = tape.batchnorm2d(
        conv,
        ids.bn_gamma,
        ids.bn_beta,
        running_mean,
        running_var,
        BN_EPS,
        BN_MOMENTUM,
    )?;
    let gate = tape.sigmoid(bn)?;
    Ok((tape.mul_bcast(x, gate)?, new_running))
}

/// Axis a triplet branch attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchAxis {
    Channel,
    Row,
    Column,
}

impl BranchAxis {
    /// Permutation bringing the branch axis to position 1 of `[N,C,H,W]`.
    fn order(self) -> [usize; 4] {
        match self {
            BranchAxis::Channel => [0, 1, 2, 3],
            BranchAxis::Row => [0, 2, 1, 3],
            BranchAxis::Column => [0, 3, 1, 2],
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            BranchAxis::Channel => "c",
            BranchAxis::Row => "h",
            BranchAxis::Column => "w",
        }
    }
}

/// Sigmoid self-gating applied in three axis orientations and merged by
/// mean. The gate is elementwise, so each orientation computes the same
/// map; the three branches are kept literal so a non-elementwise reading
/// can be swapped in behind this interface.
pub fn triplet_prenorm<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let mut merged: Option<NodeId> = None;
    for axis in [BranchAxis::Channel, BranchAxis::Row, BranchAxis::Column] {
        let order = axis.order();
        let perm = tape.permute(x, &order)?;
        let gate = tape.sigmoid(perm)?;
        let gated = tape.mul(gate, perm)?;
        let back = tape.permute(gated, &crate::ops::linalg::inverse_permutation(&order))?;
        merged = Some(match merged {
            None => back,
            Some(acc) => tape.add(acc, back)?,
        });
    }
    tape.scale(merged.expect("three branches"), 1.0 / 3.0)
}

/// Nodes of one triplet branch: the 1x1 projection producing the
/// similarity features and the learned residual scale.
#[derive(Debug, Clone, Copy)]
pub struct BranchIds {
    pub proj_weight: NodeId,
    pub beta: NodeId,
}

/// One self-attention branch in residual form.
///
/// The projection is a 1x1 convolution over channels in the original
/// orientation, so its weights stay independent of the feature-map size;
/// the projected map is then permuted until the branch axis plays the
/// channel role, flattened to `[N, d, rest]`, and attended:
///
/// ```text
/// A' = row-softmax(A·Aᵀ)        (each row of A' sums to 1)
/// out_perm = beta * (A'·A) + x_perm
/// ```
///
/// With `beta = 0` — its initialization — the branch is exactly the
/// identity on its input.
pub fn branch_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    axis: BranchAxis,
    ids: &BranchIds,
) -> Result<NodeId> {
    let proj = tape.conv2d(x, ids.proj_weight, None, ConvSpec::unit())?;
    let order = axis.order();
    let proj_perm = tape.permute(proj, &order)?;
    let x_perm = tape.permute(x, &order)?;
    let perm_shape = tape.value(x_perm).shape().to_vec();
    let (n, d) = (perm_shape[0], perm_shape[1]);
    let rest = perm_shape[2] * perm_shape[3];

    let a = tape.reshape(proj_perm, &[n, d, rest])?;
    let sim = tape.bmm_nt(a, a)?;
    let att = tape.softmax(sim, 2)?;
    let refined = tape.bmm(att, a)?;

    let x_flat = tape.reshape(x_perm, &[n, d, rest])?;
    let scaled = tape.mul_bcast(refined, ids.beta)?;
    let residual = tape.add(scaled, x_flat)?;

    let unflat = tape.reshape(residual, &perm_shape)?;
    tape.permute(unflat, &crate::ops::linalg::inverse_permutation(&order))
}

/// Weighted residual fusion of the three branch outputs:
/// `a*d_c + b*d_h + c*d_w + x`.
pub fn triplet_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    d_c: NodeId,
    d_h: NodeId,
    d_w: NodeId,
    fusion: (f64, f64, f64),
) -> Result<NodeId> {
    let sc = tape.scale(d_c, fusion.0)?;
    let sh = tape.scale(d_h, fusion.1)?;
    let sw = tape.scale(d_w, fusion.2)?;
    let acc = tape.add(sc, sh)?;
    let acc = tape.add(acc, sw)?;
    tape.add(acc, x)
}
