//! Network assembly: backbone feature extraction, multi-scale pooled
//! context with per-branch gating, triplet attention, and the dilated
//! density head.
//!
//! Parameters live in a [`ParamStore`] under a stable naming schema;
//! forward passes bind the store onto a tape and build the graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    branch_attention, channel_gate, spatial_gate, triplet_fuse, triplet_prenorm, BranchAxis,
    BranchIds, ChannelGateIds, SpatialGateIds,
};
use crate::autodiff::params::Binding;
use crate::autodiff::{he_uniform, NodeId, ParamStore, Tape};
use crate::error::{config_err, usage_err, Result};
use crate::ops::ConvSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    /// 2(64,3)+MP, 2(128,3)+MP, 3(256,3), 3(512,3): C=512 at 1/4 resolution.
    #[serde(rename = "vgg16-trunc-2pool")]
    Vgg16Pool2,
    /// Same stack with a third pool: C=512 at 1/8 resolution (ablation only).
    #[serde(rename = "vgg16-trunc-3pool")]
    Vgg16Pool3,
    /// 2 convs of 16 + MP, 2 convs of 32 + MP: C=32 at 1/4 resolution.
    #[serde(rename = "tiny")]
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionLevels {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "1+2")]
    L12,
    #[serde(rename = "1+2+3")]
    L123,
}

impl AttentionLevels {
    pub fn spatial_enabled(self) -> bool {
        !matches!(self, AttentionLevels::L1)
    }

    pub fn triplet_enabled(self) -> bool {
        matches!(self, AttentionLevels::L123)
    }
}

/// Scale-set presets studied in the ablations.
pub fn scale_set(name: &str) -> Option<Vec<usize>> {
    match name {
        "MS1" => Some(vec![1, 2, 3, 6]),
        "MS2" => Some(vec![3, 5, 7, 9]),
        "MS3" => Some(vec![1, 3, 5, 7, 9]),
        "MS4" => Some(vec![1, 3, 5, 7]),
        _ => None,
    }
}

fn default_scales() -> Vec<usize> {
    scale_set("MS3").unwrap()
}

fn default_head_widths() -> Vec<usize> {
    vec![512, 256, 128, 64]
}

fn default_fusion() -> (f64, f64, f64) {
    (0.8, 0.15, 0.05)
}

fn default_reduction() -> usize {
    16
}

fn default_spatial_kernel() -> usize {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Average-pooling bin sizes of the context branches.
    #[serde(default = "default_scales")]
    pub scales: Vec<usize>,
    #[serde(default = "default_levels")]
    pub attention_levels: AttentionLevels,
    /// Channels per context branch; defaults to `C / #scales`.
    #[serde(default)]
    pub branch_channels: Option<usize>,
    /// Output widths of the four dilated head convolutions.
    #[serde(default = "default_head_widths")]
    pub head_widths: Vec<usize>,
    /// Triplet fusion weights (a, b, c).
    #[serde(default = "default_fusion")]
    pub fusion: (f64, f64, f64),
    /// Channel-gate bottleneck divisor r.
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    /// Spatial-gate kernel size.
    #[serde(default = "default_spatial_kernel")]
    pub spatial_kernel: usize,
    /// Share gate parameters across the scale branches instead of giving
    /// each branch its own.
    #[serde(default)]
    pub shared_branch_gates: bool,
}

fn default_levels() -> AttentionLevels {
    AttentionLevels::L123
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Vgg16Pool2,
            scales: default_scales(),
            attention_levels: AttentionLevels::L123,
            branch_channels: None,
            head_widths: default_head_widths(),
            fusion: default_fusion(),
            reduction: default_reduction(),
            spatial_kernel: default_spatial_kernel(),
            shared_branch_gates: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks and CI: full pipeline,
    /// seconds-scale runtime.
    pub fn tiny() -> Self {
        ModelConfig {
            backbone: BackboneKind::Tiny,
            scales: vec![1, 2],
            head_widths: vec![16, 16, 16, 16],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(config_err!("scales must not be empty"));
        }
        if self.scales.iter().any(|&s| s == 0) {
            return Err(config_err!("every scale must be >= 1, got {:?}", self.scales));
        }
        if self.head_widths.len() != 4 || self.head_widths.iter().any(|&w| w == 0) {
            return Err(config_err!(
                "head_widths must list the four dilated conv widths, got {:?}",
                self.head_widths
            ));
        }
        if self.reduction == 0 {
            return Err(config_err!("reduction must be >= 1"));
        }
        if self.spatial_kernel == 0 || self.spatial_kernel % 2 == 0 {
            return Err(config_err!(
                "spatial_kernel must be odd, got {}",
                self.spatial_kernel
            ));
        }
        let (a, b, c) = self.fusion;
        if a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(config_err!("fusion weights must be non-negative"));
        }
        Ok(())
    }

    /// Backbone output channels.
    pub fn backbone_channels(&self) -> usize {
        match self.backbone {
            BackboneKind::Tiny => 32,
            _ => 512,
        }
    }

    /// Spatial reduction factor of the backbone.
    pub fn downsample(&self) -> usize {
        match self.backbone {
            BackboneKind::Vgg16Pool3 => 8,
            _ => 4,
        }
    }

    /// Channels of each pooled context branch.
    pub fn branch_width(&self) -> usize {
        self.branch_channels
            .unwrap_or_else(|| (self.backbone_channels() / self.scales.len()).max(1))
    }

    /// Channels of the concatenated context map fed to the head.
    pub fn fused_channels(&self) -> usize {
        self.backbone_channels() + self.scales.len() * self.branch_width()
    }

    fn gate_prefix(&self, branch: usize) -> String {
        if self.shared_branch_gates {
            "ms.shared".to_string()
        } else {
            format!("ms.b{branch}")
        }
    }

    /// `(in, out)` channels of every backbone conv, with pools marked.
    fn backbone_plan(&self) -> Vec<BackboneStep> {
        let mut steps = Vec::new();
        let blocks: &[(usize, usize, bool)] = match self.backbone {
            BackboneKind::Tiny => &[(2, 16, true), (2, 32, true)],
            BackboneKind::Vgg16Pool2 => {
                &[(2, 64, true), (2, 128, true), (3, 256, false), (3, 512, false)]
            }
            BackboneKind::Vgg16Pool3 => {
                &[(2, 64, true), (2, 128, true), (3, 256, true), (3, 512, false)]
            }
        };
        let mut in_c = 3;
        for &(count, width, pool) in blocks {
            for _ in 0..count {
                steps.push(BackboneStep::Conv {
                    in_c,
                    out_c: width,
                });
                in_c = width;
            }
            if pool {
                steps.push(BackboneStep::MaxPool);
            }
        }
        steps
    }
}

enum BackboneStep {
    Conv { in_c: usize, out_c: usize },
    MaxPool,
}

// ---- parameter registration -------------------------------------------

fn register_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    bias: bool,
) {
    let fan_in = in_c * k * k;
    store.insert(
        &format!("{name}.weight"),
        he_uniform(&[out_c, in_c, k, k], fan_in, rng),
    );
    if bias {
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[out_c]));
    }
}

fn register_bn<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) {
    store.insert(&format!("{name}.gamma"), Tensor::ones(&[c]));
    store.insert(&format!("{name}.beta"), Tensor::zeros(&[c]));
    store.insert_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]));
    store.insert_buffer(&format!("{name}.running_var"), Tensor::ones(&[c]));
}

fn register_gates<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    config: &ModelConfig,
    prefix: &str,
) {
    let c = config.branch_width();
    let bott = (c / config.reduction).max(1);
    register_conv(store, rng, &format!("{prefix}.cg.fc1"), bott, c, 1, true);
    register_conv(store, rng, &format!("{prefix}.cg.fc2"), c, bott, 1, true);
    if config.attention_levels.spatial_enabled() {
        let k = config.spatial_kernel;
        register_conv(store, rng, &format!("{prefix}.sg.conv"), 1, 2, k, false);
        register_bn(store, &format!("{prefix}.sg.bn"), 1);
    }
}

/// Build a freshly initialized parameter store for a configuration.
///
/// Convolutions draw He-uniform weights, biases start at zero, batchnorm
/// at identity, and every triplet residual scale at exactly zero, making
/// each branch the identity map right after initialization. Deterministic
/// for a fixed seed.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();

    let mut conv_idx = 0usize;
    for step in config.backbone_plan() {
        if let BackboneStep::Conv { in_c, out_c } = step {
            register_conv(&mut store, &mut rng, &format!("bb.c{conv_idx}"), out_c, in_c, 3, true);
            conv_idx += 1;
        }
    }

    let c = config.backbone_channels();
    let cb = config.branch_width();
    for i in 0..config.scales.len() {
        register_conv(&mut store, &mut rng, &format!("ms.b{i}.proj"), cb, c, 1, true);
        if !config.shared_branch_gates {
            register_gates(&mut store, &mut rng, config, &format!("ms.b{i}"));
        }
    }
    if config.shared_branch_gates {
        register_gates(&mut store, &mut rng, config, "ms.shared");
    }

    if config.attention_levels.triplet_enabled() {
        let cf = config.fused_channels();
        for key in ["c", "h", "w"] {
            register_conv(&mut store, &mut rng, &format!("tri.{key}.proj"), cf, cf, 1, false);
            store.insert(&format!("tri.{key}.beta"), Tensor::zeros(&[1]));
        }
    }

    let cf = config.fused_channels();
    let widths = &config.head_widths;
    register_conv(&mut store, &mut rng, "head.pre", widths[0], cf, 3, false);
    register_bn(&mut store, "head.pre_bn", widths[0]);
    let mut in_w = widths[0];
    for (i, &w) in widths.iter().enumerate() {
        register_conv(&mut store, &mut rng, &format!("head.d{i}"), w, in_w, 3, false);
        register_bn(&mut store, &format!("head.d{i}_bn"), w);
        in_w = w;
    }
    register_conv(&mut store, &mut rng, "head.out", 1, in_w, 1, true);
    Ok(store)
}

// ---- forward passes ------------------------------------------------------

fn conv_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    name: &str,
    x: NodeId,
    spec: ConvSpec,
    bias: bool,
) -> Result<NodeId> {
    let w = binding.id(&format!("{name}.weight"))?;
    let b = if bias {
        Some(binding.id(&format!("{name}.bias"))?)
    } else {
        None
    };
    tape.conv2d(x, w, b, spec)
}

/// Batchnorm through named parameters/buffers, recording any running-stat
/// update on the tape for the trainer to apply.
fn bn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    store: &ParamStore<T>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let gamma = binding.id(&format!("{name}.gamma"))?;
    let beta = binding.id(&format!("{name}.beta"))?;
    let rm = store.buffer(&format!("{name}.running_mean"))?.clone();
    let rv = store.buffer(&format!("{name}.running_var"))?.clone();
    let (out, new_running) = tape.batchnorm2d(
        x,
        gamma,
        beta,
        &rm,
        &rv,
        crate::ops::BN_EPS,
        crate::ops::BN_MOMENTUM,
    )?;
    if let Some((nm, nv)) = new_running {
        tape.record_buffer_update(format!("{name}.running_mean"), nm);
        tape.record_buffer_update(format!("{name}.running_var"), nv);
    }
    Ok(out)
}

/// Backbone: 3x3 convolutions with ReLU, max-pooled per plan. Input must
/// be divisible by the downsampling factor.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    config: &ModelConfig,
    image: NodeId,
) -> Result<NodeId> {
    let (_, c, h, w) = tape.value(image).dims4()?;
    if c != 3 {
        return Err(usage_err!("backbone expects 3-channel input, got {c}"));
    }
    let d = config.downsample();
    if h % d != 0 || w % d != 0 {
        return Err(usage_err!(
            "input {h}x{w} is not divisible by {d}; pad or crop the image to a multiple of {d}"
        ));
    }
    // Center the [0,1] raster before the first convolution, mirroring
    // the mean-subtraction preprocessing the backbone was designed for.
    let mut x = tape.offset(image, -0.5)?;
    let mut conv_idx = 0usize;
    for step in config.backbone_plan() {
        match step {
            BackboneStep::Conv { .. } => {
                x = conv_forward(
                    tape,
                    binding,
                    &format!("bb.c{conv_idx}"),
                    x,
                    ConvSpec::same(3),
                    true,
                )?;
                x = tape.relu(x)?;
                conv_idx += 1;
            }
            BackboneStep::MaxPool => {
                x = tape.pool2d(x, crate::ops::PoolKind::Max, 2, 2)?;
            }
        }
    }
    Ok(x)
}

fn branch_gate_ids(binding: &Binding, prefix: &str) -> Result<ChannelGateIds> {
    Ok(ChannelGateIds {
        fc1_weight: binding.id(&format!("{prefix}.cg.fc1.weight"))?,
        fc1_bias: binding.id(&format!("{prefix}.cg.fc1.bias"))?,
        fc2_weight: binding.id(&format!("{prefix}.cg.fc2.weight"))?,
        fc2_bias: binding.id(&format!("{prefix}.cg.fc2.bias"))?,
    })
}

/// Multi-scale context: pool the feature map to each configured bin size,
/// project to the branch width, upsample back, gate per the attention
/// level, and concatenate everything with the untouched feature map.
pub fn multi_scale_context<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    store: &ParamStore<T>,
    config: &ModelConfig,
    features: NodeId,
) -> Result<NodeId> {
    let (_, _, h, w) = tape.value(features).dims4()?;
    let mut parts = vec![features];
    for (i, &bins) in config.scales.iter().enumerate() {
        if bins > h.min(w) {
            return Err(config_err!(
                "pooling scale {bins} exceeds the {h}x{w} feature map (scale index {i})"
            ));
        }
        let pooled = tape.avg_pool_to_bins(features, bins)?;
        let proj = conv_forward(
            tape,
            binding,
            &format!("ms.b{i}.proj"),
            pooled,
            ConvSpec::unit(),
            true,
        )?;
        let up = tape.bilinear_upsample(proj, h, w)?;
        let prefix = config.gate_prefix(i);
        let gated = channel_gate(tape, up, &branch_gate_ids(binding, &prefix)?)?;
        let gated = if config.attention_levels.spatial_enabled() {
            let ids = SpatialGateIds {
                conv_weight: binding.id(&format!("{prefix}.sg.conv.weight"))?,
                bn_gamma: binding.id(&format!("{prefix}.sg.bn.gamma"))?,
                bn_beta: binding.id(&format!("{prefix}.sg.bn.beta"))?,
            };
            let rm = store.buffer(&format!("{prefix}.sg.bn.running_mean"))?.clone();
            let rv = store.buffer(&format!("{prefix}.sg.bn.running_var"))?.clone();
            let (out, new_running) = spatial_gate(tape, gated, &ids, &rm, &rv)?;
            if let Some((nm, nv)) = new_running {
                tape.record_buffer_update(format!("{prefix}.sg.bn.running_mean"), nm);
                tape.record_buffer_update(format!("{prefix}.sg.bn.running_var"), nv);
            }
            out
        } else {
            gated
        };
        parts.push(gated);
    }
    tape.concat(&parts, 1)
}

/// Triplet attention over the fused context map.
pub fn triplet_attention<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    config: &ModelConfig,
    fused: NodeId,
) -> Result<NodeId> {
    let pre = triplet_prenorm(tape, fused)?;
    let mut branches = Vec::with_capacity(3);
    for axis in [BranchAxis::Channel, BranchAxis::Row, BranchAxis::Column] {
        let ids = BranchIds {
            proj_weight: binding.id(&format!("tri.{}.proj.weight", axis.key()))?,
            beta: binding.id(&format!("tri.{}.beta", axis.key()))?,
        };
        branches.push(branch_attention(tape, pre, axis, &ids)?);
    }
    triplet_fuse(
        tape,
        fused,
        branches[0],
        branches[1],
        branches[2],
        config.fusion,
    )
}

/// Density head: a 3x3 conv with batchnorm, four dilated 3x3 convs
/// (dilation 2) with batchnorm and ReLU, and a 1x1 projection with a
/// terminal ReLU enforcing non-negative density.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    store: &ParamStore<T>,
    config: &ModelConfig,
    fused: NodeId,
) -> Result<NodeId> {
    let mut x = conv_forward(tape, binding, "head.pre", fused, ConvSpec::same(3), false)?;
    x = bn_forward(tape, binding, store, "head.pre_bn", x)?;
    let dilated = ConvSpec {
        stride: 1,
        pad: 2,
        dilation: 2,
    };
    for i in 0..config.head_widths.len() {
        x = conv_forward(tape, binding, &format!("head.d{i}"), x, dilated, false)?;
        x = bn_forward(tape, binding, store, &format!("head.d{i}_bn"), x)?;
        x = tape.relu(x)?;
    }
    x = conv_forward(tape, binding, "head.out", x, ConvSpec::unit(), true)?;
    tape.relu(x)
}

/// Full forward pass: image `[N,3,H,W]` to density map `[N,1,H/4,W/4]`
/// (1/8 for the three-pool ablation backbone).
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    store: &ParamStore<T>,
    config: &ModelConfig,
    image: NodeId,
) -> Result<NodeId> {
    config.validate()?;
    let features = backbone_forward(tape, binding, config, image)?;
    let context = multi_scale_context(tape, binding, store, config, features)?;
    let fused = if config.attention_levels.triplet_enabled() {
        triplet_attention(tape, binding, config, context)?
    } else {
        context
    };
    head_forward(tape, binding, store, config, fused)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_tiny(
        config: &ModelConfig,
        seed: u64,
        image: Tensor<f64>,
        train: bool,
    ) -> Tensor<f64> {
        let store = init_params::<f64>(config, seed).unwrap();
        let mut tape = Tape::<f64>::new().with_checked(true).with_train(train);
        let binding = store.bind(&mut tape);
        let x = tape.constant(image);
        let out = model_forward(&mut tape, &binding, &store, config, x).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn tiny_backbone_shape_contract() {
        let config = ModelConfig::tiny();
        let store = init_params::<f64>(&config, 0).unwrap();
        let mut tape = Tape::<f64>::new();
        let binding = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let f = backbone_forward(&mut tape, &binding, &config, x).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 32, 16, 16]);
    }

    #[test]
    fn vgg_backbone_variants_hit_their_resolutions() {
        // Two-pool: 512 channels at 1/4; three-pool ablation: 1/8.
        for (kind, expect) in [
            (BackboneKind::Vgg16Pool2, [1usize, 512, 16, 16]),
            (BackboneKind::Vgg16Pool3, [1usize, 512, 8, 8]),
        ] {
            let config = ModelConfig {
                backbone: kind,
                ..ModelConfig::default()
            };
            let store = init_params::<f32>(&config, 0).unwrap();
            let mut tape = Tape::<f32>::new();
            let binding = store.bind(&mut tape);
            let x = tape.constant(Tensor::<f32>::from_fn(&[1, 3, 64, 64], |i| {
                ((i % 17) as f32) / 17.0
            }));
            let f = backbone_forward(&mut tape, &binding, &config, x).unwrap();
            assert_eq!(tape.value(f).shape(), &expect, "{kind:?}");
        }
    }

    #[test]
    fn indivisible_input_is_usage_error_with_guidance() {
        let config = ModelConfig::tiny();
        let store = init_params::<f64>(&config, 0).unwrap();
        let mut tape = Tape::<f64>::new();
        let binding = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 3, 66, 64]));
        let err = backbone_forward(&mut tape, &binding, &config, x).unwrap_err();
        assert!(err.to_string().contains("pad or crop"));
    }

    #[test]
    fn fused_channel_arithmetic_matches_configuration() {
        // Default: C=512, five scales, Cb=floor(512/5)=102 -> 512+510=1022.
        let config = ModelConfig::default();
        assert_eq!(config.branch_width(), 102);
        assert_eq!(config.fused_channels(), 1022);
        // Tiny: C=32, two scales, Cb=16 -> 64.
        let tiny = ModelConfig::tiny();
        assert_eq!(tiny.fused_channels(), 64);
    }

    #[test]
    fn forward_is_deterministic_for_fixed_seed() {
        let config = ModelConfig::tiny();
        let image = Tensor::<f64>::from_fn(&[1, 3, 16, 16], |i| ((i as f64) * 0.013).sin().abs());
        let a = forward_tiny(&config, 42, image.clone(), false);
        let b = forward_tiny(&config, 42, image, false);
        assert_eq!(a, b);
    }

    #[test]
    fn init_params_is_seed_deterministic() {
        let config = ModelConfig::tiny();
        let a = init_params::<f64>(&config, 9).unwrap();
        let b = init_params::<f64>(&config, 9).unwrap();
        for (name, p) in a.iter_params() {
            assert_eq!(p.value, b.param(name).unwrap().value, "{name}");
        }
    }

    #[test]
    fn triplet_betas_start_at_zero() {
        let store = init_params::<f64>(&ModelConfig::tiny(), 3).unwrap();
        for key in ["c", "h", "w"] {
            let beta = &store.param(&format!("tri.{key}.beta")).unwrap().value;
            assert_eq!(beta.data(), &[0.0]);
        }
    }

    #[test]
    fn output_shape_and_nonnegativity_across_levels() {
        let image = Tensor::<f64>::from_fn(&[1, 3, 16, 16], |i| ((i as f64) * 0.4).sin() * 0.5 + 0.5);
        for levels in [AttentionLevels::L1, AttentionLevels::L12, AttentionLevels::L123] {
            let config = ModelConfig {
                attention_levels: levels,
                ..ModelConfig::tiny()
            };
            let out = forward_tiny(&config, 7, image.clone(), false);
            assert_eq!(out.shape(), &[1, 1, 4, 4], "{levels:?}");
            assert!(out.data().iter().all(|&v| v >= 0.0), "{levels:?}");
        }
    }

    #[test]
    fn ablation_levels_differ_numerically() {
        let image = Tensor::<f64>::from_fn(&[1, 3, 16, 16], |i| ((i * 7 % 23) as f64) / 23.0);
        let l1 = forward_tiny(
            &ModelConfig {
                attention_levels: AttentionLevels::L1,
                ..ModelConfig::tiny()
            },
            11,
            image.clone(),
            false,
        );
        let full = forward_tiny(&ModelConfig::tiny(), 11, image, false);
        assert_eq!(l1.shape(), full.shape());
        let max_diff = l1
            .data()
            .iter()
            .zip(full.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-9, "ablation variants should not coincide");
    }

    #[test]
    fn zeroed_gates_scale_branches_by_a_quarter() {
        // With all gate convolutions (and their biases) zeroed, both gates
        // sigmoid to 0.5 everywhere, so each context branch is its
        // upsampled projection times 0.25.
        let config = ModelConfig {
            attention_levels: AttentionLevels::L12,
            ..ModelConfig::tiny()
        };
        let mut store = init_params::<f64>(&config, 5).unwrap();
        let zero_names: Vec<String> = store
            .param_names()
            .filter(|n| n.contains(".cg.") || n.contains(".sg."))
            .map(String::from)
            .collect();
        for name in zero_names {
            let shape = store.param(&name).unwrap().value.shape().to_vec();
            store.set_param_value(&name, Tensor::zeros(&shape)).unwrap();
        }
        let image = Tensor::<f64>::from_fn(&[1, 3, 8, 8], |i| ((i as f64) * 0.3).cos() * 0.5 + 0.5);
        let mut tape = Tape::<f64>::new();
        let binding = store.bind(&mut tape);
        let x = tape.constant(image);
        let f = backbone_forward(&mut tape, &binding, &config, x).unwrap();
        let ctx = multi_scale_context(&mut tape, &binding, &store, &config, f).unwrap();
        let (_, _, h, w) = tape.value(f).dims4().unwrap();

        // Rebuild each branch without gates and compare against the
        // concatenated output slices.
        let c = config.backbone_channels();
        let cb = config.branch_width();
        let ctx_val = tape.value(ctx).clone();
        for (i, &bins) in config.scales.iter().enumerate() {
            let pooled = tape.avg_pool_to_bins(f, bins).unwrap();
            let proj = conv_forward(
                &mut tape,
                &binding,
                &format!("ms.b{i}.proj"),
                pooled,
                ConvSpec::unit(),
                true,
            )
            .unwrap();
            let up = tape.bilinear_upsample(proj, h, w).unwrap();
            let expect = crate::ops::scale(tape.value(up), 0.25);
            let offset = (c + i * cb) * h * w;
            for (j, e) in expect.data().iter().enumerate() {
                assert!((ctx_val.data()[offset + j] - e).abs() < 1e-12);
            }
        }
    }
}
