//! Desk-scale experiment harness: run configuration, the Adam training
//! loop, evaluation, whole-image prediction, and the gradient-check
//! report. The CLI subcommands are thin wrappers over these functions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{
    branch_attention, channel_gate, spatial_gate, triplet_prenorm, BranchAxis, BranchIds,
    ChannelGateIds, SpatialGateIds,
};
use crate::autodiff::gradcheck::{grad_check_refined, GRADCHECK_EPS};
use crate::autodiff::params::Binding;
use crate::autodiff::{adam_step, grad_check, AdamConfig, NodeId, ParamStore, Tape};
use crate::data::{load_annotations, synth::sample_rng, synth_scene, AnnotatedImage, SynthConfig};
use crate::density::{downsample_count_preserving, euclidean_loss, make_density_map, DensityMap};
use crate::error::{config_err, usage_err, Error, Result};
use crate::io::weights::{load_weights, save_weights};
use crate::model::{init_params, model_forward, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: usize,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    1
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Where the training/evaluation samples come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Path to an `MLA-ANN 1` index file.
    Annotations { path: PathBuf },
    /// Generated scenes; either a named preset or an inline config.
    Synth {
        #[serde(default)]
        preset: Option<String>,
        #[serde(default)]
        config: Option<SynthConfig>,
        #[serde(default)]
        count: Option<usize>,
    },
}

/// The eight-image 64x64 overfitting task.
pub fn tiny_overfit_synth() -> (SynthConfig, usize) {
    (
        SynthConfig {
            width: 64,
            height: 64,
            count_range: (80, 100),
            radius_range: (2.0, 4.0),
            background_amplitude: 0.1,
            margin: 12.0,
            min_separation: 4.0,
        },
        8,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Gaussian width of the ground-truth density kernels, in pixels.
    pub sigma: f64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    /// Parameter-name prefixes excluded from optimization.
    #[serde(default)]
    pub freeze: Vec<String>,
    /// Checkpoint cadence in steps; 0 disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl RunConfig {
    /// The overfitting run used by the acceptance suite: tiny model,
    /// eight synthetic 64x64 scenes at sigma 4, Adam at 1e-4, 200 steps.
    pub fn tiny_overfit(out_dir: PathBuf, seed: u64) -> Self {
        RunConfig {
            model: ModelConfig::tiny(),
            optimizer: OptimizerConfig {
                lr: 1e-4,
                beta1: default_beta1(),
                beta2: default_beta2(),
                eps: default_adam_eps(),
                batch_size: 8,
                steps: 200,
            },
            sigma: 4.0,
            dataset: DatasetConfig::Synth {
                preset: Some("tiny-overfit".into()),
                config: None,
                count: None,
            },
            seed,
            out_dir,
            precision: Precision::F64,
            freeze: Vec::new(),
            checkpoint_every: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| config_err!("bad run config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.sigma <= 0.0 {
            return Err(config_err!("sigma must be positive, got {}", self.sigma));
        }
        if self.optimizer.batch_size == 0 {
            return Err(config_err!("batch_size must be >= 1"));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(config_err!("learning rate must be positive"));
        }
        if let DatasetConfig::Annotations { path } = &self.dataset {
            if !path.exists() {
                return Err(config_err!(
                    "annotation index {} does not exist",
                    path.display()
                ));
            }
        }
        Ok(())
    }
}

/// Materialize the configured dataset.
pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<AnnotatedImage>> {
    match &cfg.dataset {
        DatasetConfig::Annotations { path } => load_annotations(path),
        DatasetConfig::Synth {
            preset,
            config,
            count,
        } => {
            let (synth_cfg, n) = match (preset.as_deref(), config) {
                (Some("tiny-overfit"), None) => tiny_overfit_synth(),
                (Some(other), None) => {
                    return Err(config_err!("unknown synth preset '{other}'"))
                }
                (None, Some(c)) => (c.clone(), count.unwrap_or(8)),
                (Some(_), Some(_)) => {
                    return Err(config_err!("give either a synth preset or a config, not both"))
                }
                (None, None) => return Err(config_err!("synth dataset needs a preset or config")),
            };
            let n = count.unwrap_or(n);
            generate_synth_dataset(&synth_cfg, n, cfg.seed)
        }
    }
}

/// Deterministic synthetic dataset; per-sample RNG streams make the
/// build order-independent.
pub fn generate_synth_dataset(
    cfg: &SynthConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<AnnotatedImage>> {
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let scene = synth_scene(cfg, &mut rng)?;
            let mut sample = scene.sample;
            sample.id = format!("synth{i:04}");
            if scene.separation_relaxed {
                eprintln!("note: sample {} relaxed its head separation", sample.id);
            }
            Ok(sample)
        })
        .collect()
}

/// Ground-truth density at the model's output resolution.
pub fn ground_truth_map(
    sample: &AnnotatedImage,
    sigma: f64,
    downsample: usize,
) -> Result<DensityMap> {
    let full = make_density_map(&sample.points, sample.height(), sample.width(), sigma)?;
    downsample_count_preserving(&full, downsample)
}

fn stack_images<T: Scalar>(samples: &[&AnnotatedImage]) -> Result<Tensor<T>> {
    let (h, w) = (samples[0].height(), samples[0].width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if s.height() != h || s.width() != w {
            return Err(usage_err!("batch mixes image sizes"));
        }
        data.extend(s.image.data().iter().map(|&v| T::from_f64(v)));
    }
    Tensor::from_vec(&[samples.len(), 3, h, w], data)
}

fn stack_maps<T: Scalar>(maps: &[&DensityMap]) -> Result<Tensor<T>> {
    let (h, w) = (maps[0].height(), maps[0].width());
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        data.extend(m.values.data().iter().map(|&v| T::from_f64(v)));
    }
    Tensor::from_vec(&[maps.len(), 1, h, w], data)
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub train_mae: f64,
    pub train_mse: f64,
}

/// Run the training loop described by the config. Deterministic under a
/// fixed seed: dataset, initialization and batch order all derive from it.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F64 => train_typed::<f64>(cfg),
        Precision::F32 => train_typed::<f32>(cfg),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig) -> Result<TrainOutcome> {
    let samples = load_dataset(cfg)?;
    if samples.is_empty() {
        return Err(config_err!("training needs at least one sample"));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let down = cfg.model.downsample();
    let gts: Vec<DensityMap> = samples
        .iter()
        .map(|s| ground_truth_map(s, cfg.sigma, down))
        .collect::<Result<_>>()?;

    let mut store: ParamStore<T> = init_params(&cfg.model, cfg.seed)?;
    store.freeze_prefixes(&cfg.freeze);

    let mut log = String::new();
    let adam = cfg.optimizer.adam();
    let batch = cfg.optimizer.batch_size.min(samples.len());
    let mut cursor = 0usize;
    let mut initial_loss = None;
    let mut final_loss = 0.0f64;

    for step in 1..=cfg.optimizer.steps {
        let batch_samples: Vec<&AnnotatedImage> = (0..batch)
            .map(|i| &samples[(cursor + i) % samples.len()])
            .collect();
        let batch_gts: Vec<&DensityMap> = (0..batch)
            .map(|i| &gts[(cursor + i) % gts.len()])
            .collect();
        cursor = (cursor + batch) % samples.len();

        let mut tape = Tape::<T>::new().with_train(true);
        let binding = store.bind(&mut tape);
        let images = tape.constant(stack_images::<T>(&batch_samples)?);
        let pred = model_forward(&mut tape, &binding, &store, &cfg.model, images)?;
        let gt = tape.constant(stack_maps::<T>(&batch_gts)?);
        let loss_node = euclidean_loss(&mut tape, pred, gt, batch)?;
        let loss = tape.value(loss_node).item()?.to_f64();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became non-finite at step {step}; parameter norm {:.6e}",
                store.value_norm()
            )));
        }
        initial_loss.get_or_insert(loss);
        final_loss = loss;

        let grads = tape.backward(loss_node)?;
        let mut named: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for name in store.param_names().map(String::from).collect::<Vec<_>>() {
            named.insert(name.clone(), grads.wrt(binding.id(&name)?));
        }
        adam_step(&mut store, &named, adam)?;
        for (name, value) in tape.take_buffer_updates() {
            store.set_buffer(&name, value)?;
        }

        let _ = writeln!(
            log,
            "step={step} loss={loss:.9e} lr={:.4e} batch={batch}",
            adam.lr
        );
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save_weights(&store, &cfg.out_dir.join(format!("ckpt_{step:06}.mlaw")))?;
        }
    }

    let checkpoint = cfg.out_dir.join("final.mlaw");
    save_weights(&store, &checkpoint)?;
    let log_path = cfg.out_dir.join("train_log.txt");
    std::fs::write(&log_path, &log)?;

    // Train-set metrics with the trained weights, eval mode.
    let report = evaluate_samples(&store, &cfg.model, &samples)?;
    let metrics_path = cfg.out_dir.join("train_metrics.txt");
    std::fs::write(&metrics_path, report.to_text())?;

    Ok(TrainOutcome {
        initial_loss: initial_loss.unwrap_or(0.0),
        final_loss,
        steps: cfg.optimizer.steps,
        checkpoint,
        log_path,
        train_mae: report.mae,
        train_mse: report.mse,
    })
}

/// Per-image counts plus aggregate errors.
pub struct EvalReport {
    pub records: Vec<(String, f64, f64)>,
    pub mae: f64,
    pub mse: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, gt, pred) in &self.records {
            let _ = writeln!(
                out,
                "image={id} gt={gt:.4} pred={pred:.4} abs_err={:.4}",
                (gt - pred).abs()
            );
        }
        let _ = writeln!(
            out,
            "aggregate mae={:.6} mse={:.6} n={}",
            self.mae,
            self.mse,
            self.records.len()
        );
        out
    }
}

/// Evaluate a parameter snapshot over samples (eval mode, per-image).
pub fn evaluate_samples<T: Scalar>(
    store: &ParamStore<T>,
    model: &ModelConfig,
    samples: &[AnnotatedImage],
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(samples.len());
    for sample in samples {
        let mut tape = Tape::<T>::new();
        let binding = store.bind(&mut tape);
        let image = tape.constant(stack_images::<T>(&[sample])?);
        let pred = model_forward(&mut tape, &binding, store, model, image)?;
        let pred_count: f64 = tape.value(pred).data().iter().map(|v| v.to_f64()).sum();
        records.push((sample.id.clone(), sample.points.len() as f64, pred_count));
    }
    let truth: Vec<f64> = records.iter().map(|r| r.1).collect();
    let predicted: Vec<f64> = records.iter().map(|r| r.2).collect();
    let (mae, mse) = crate::density::mae_mse(&truth, &predicted)?;
    Ok(EvalReport { records, mae, mse })
}

/// Evaluate a checkpoint over the configured dataset, optionally under a
/// k-fold partition whose per-fold metrics are averaged.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, kfold: Option<usize>) -> Result<String> {
    cfg.validate()?;
    let samples = load_dataset(cfg)?;
    if samples.is_empty() {
        return Err(config_err!("evaluation needs at least one sample"));
    }
    let mut store: ParamStore<f64> = init_params(&cfg.model, cfg.seed)?;
    load_weights(&mut store, checkpoint)?;

    let mut out = String::new();
    match kfold {
        None => {
            let report = evaluate_samples(&store, &cfg.model, &samples)?;
            out.push_str(&report.to_text());
        }
        Some(k) => {
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            let folds = crate::data::kfold_splits(&ids, k, cfg.seed)?;
            let mut fold_maes = Vec::new();
            let mut fold_mses = Vec::new();
            for (i, (_, test_ids)) in folds.iter().enumerate() {
                let test: Vec<AnnotatedImage> = samples
                    .iter()
                    .filter(|s| test_ids.contains(&s.id))
                    .cloned()
                    .collect();
                let report = evaluate_samples(&store, &cfg.model, &test)?;
                let _ = writeln!(
                    out,
                    "fold={i} mae={:.6} mse={:.6} n={}",
                    report.mae,
                    report.mse,
                    report.records.len()
                );
                fold_maes.push(report.mae);
                fold_mses.push(report.mse);
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let _ = writeln!(
                out,
                "average mae={:.6} mse={:.6} folds={k}",
                mean(&fold_maes),
                mean(&fold_mses)
            );
        }
    }
    Ok(out)
}

/// Reflection-pad a `[3,H,W]` raster on the right/bottom to multiples of
/// `factor`.
pub fn reflect_pad_to_multiple(image: &Tensor<f64>, factor: usize) -> Result<Tensor<f64>> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let nh = h.div_ceil(factor) * factor;
    let nw = w.div_ceil(factor) * factor;
    if nh == h && nw == w {
        return Ok(image.clone());
    }
    if h < 2 || w < 2 {
        return Err(usage_err!("image too small to reflect-pad"));
    }
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else {
            // Mirror without repeating the edge sample.
            n - 2 - (i - n) % (n - 1)
        }
    };
    let mut data = vec![0.0f64; c * nh * nw];
    for ch in 0..c {
        for y in 0..nh {
            let sy = reflect(y, h);
            for x in 0..nw {
                let sx = reflect(x, w);
                data[(ch * nh + y) * nw + x] = image.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_vec(&[c, nh, nw], data)
}

pub struct Prediction {
    pub map: Tensor<f64>,
    pub predicted_count: f64,
    pub padded: bool,
}

/// Whole-image prediction. Images not divisible by the model's
/// downsampling factor are reflection-padded, predicted, and the map is
/// cropped back to `ceil(H/d) x ceil(W/d)`.
pub fn predict(cfg: &ModelConfig, store: &ParamStore<f64>, image: &Tensor<f64>) -> Result<Prediction> {
    let d = cfg.downsample();
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let padded_img = reflect_pad_to_multiple(image, d)?;
    let padded = padded_img.shape() != image.shape();

    let mut tape = Tape::<f64>::new();
    let binding = store.bind(&mut tape);
    let input = {
        let (c, ph, pw) = (
            padded_img.shape()[0],
            padded_img.shape()[1],
            padded_img.shape()[2],
        );
        tape.constant(padded_img.reshape(&[1, c, ph, pw])?)
    };
    let pred = model_forward(&mut tape, &binding, store, cfg, input)?;
    let full = tape.value(pred);
    let (_, _, mh, mw) = full.dims4()?;
    let (oh, ow) = (h.div_ceil(d), w.div_ceil(d));
    let mut map = Tensor::<f64>::zeros(&[oh, ow]);
    for y in 0..oh.min(mh) {
        for x in 0..ow.min(mw) {
            map.data_mut()[y * ow + x] = full.data()[y * mw + x];
        }
    }
    let predicted_count = map.sum();
    Ok(Prediction {
        map,
        predicted_count,
        padded,
    })
}

/// One gradient-check entry: module name, max relative error, and how
/// many coordinates needed the finer finite-difference oracle.
pub struct GradCheckReport {
    pub entries: Vec<(String, f64, usize)>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|(_, e, _)| *e < self.threshold)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |a, (_, e, _)| a.max(*e))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, err, refined) in &self.entries {
            let status = if *err < self.threshold { "ok" } else { "FAIL" };
            let _ = writeln!(
                out,
                "module={name} max_rel_err={err:.3e} refined_coords={refined} {status}"
            );
        }
        let _ = writeln!(
            out,
            "overall max_rel_err={:.3e} threshold={:.1e} {}",
            self.max_error(),
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

fn rng_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = sample_rng(seed, 0);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Central-difference verification of every attention module and the
/// full tiny model. Threshold 1e-4 at 64-bit with eps 1e-4.
pub fn gradcheck_report() -> Result<GradCheckReport> {
    let mut entries = Vec::new();
    let (c, hw) = (4usize, 6usize);

    // Channel gate: input and all gate parameters as check leaves.
    let inputs = vec![
        rng_tensor(&[1, c, hw, hw], 1.0, 1),
        rng_tensor(&[2, c, 1, 1], 0.8, 2),
        rng_tensor(&[2], 0.2, 3),
        rng_tensor(&[c, 2, 1, 1], 0.8, 4),
        rng_tensor(&[c], 0.2, 5),
    ];
    let err = grad_check(
        &|tape, ids| {
            let ids_struct = ChannelGateIds {
                fc1_weight: ids[1],
                fc1_bias: ids[2],
                fc2_weight: ids[3],
                fc2_bias: ids[4],
            };
            let out = channel_gate(tape, ids[0], &ids_struct)?;
            let w = tape.constant(rng_tensor(&[1, c, hw, hw], 1.0, 6));
            let weighted = tape.mul(out, w)?;
            tape.sum_all(weighted)
        },
        &inputs,
        GRADCHECK_EPS,
    )?;
    entries.push(("channel_gate".to_string(), err, 0));

    // Spatial gate, train-mode batchnorm.
    let inputs = vec![
        rng_tensor(&[1, c, hw, hw], 1.0, 7),
        rng_tensor(&[1, 2, 3, 3], 0.5, 8),
        rng_tensor(&[1], 0.5, 9),
        rng_tensor(&[1], 0.2, 10),
    ];
    let err = grad_check(
        &|tape, ids| {
            tape.set_train(true);
            let ids_struct = SpatialGateIds {
                conv_weight: ids[1],
                bn_gamma: ids[2],
                bn_beta: ids[3],
            };
            let (out, _) = spatial_gate(
                tape,
                ids[0],
                &ids_struct,
                &Tensor::zeros(&[1]),
                &Tensor::ones(&[1]),
            )?;
            let w = tape.constant(rng_tensor(&[1, c, hw, hw], 1.0, 11));
            let weighted = tape.mul(out, w)?;
            tape.sum_all(weighted)
        },
        &inputs,
        GRADCHECK_EPS,
    )?;
    entries.push(("spatial_gate".to_string(), err, 0));

    // Pre-normalization.
    let err = grad_check(
        &|tape, ids| {
            let out = triplet_prenorm(tape, ids[0])?;
            let w = tape.constant(rng_tensor(&[1, c, hw, hw], 1.0, 13));
            let weighted = tape.mul(out, w)?;
            tape.sum_all(weighted)
        },
        &[rng_tensor(&[1, c, hw, hw], 1.5, 12)],
        GRADCHECK_EPS,
    )?;
    entries.push(("triplet_prenorm".to_string(), err, 0));

    // Each triplet branch with a non-zero residual scale.
    for (axis, name) in [
        (BranchAxis::Channel, "branch_attention_channel"),
        (BranchAxis::Row, "branch_attention_row"),
        (BranchAxis::Column, "branch_attention_column"),
    ] {
        let inputs = vec![
            rng_tensor(&[1, c, hw, hw], 1.0, 20),
            rng_tensor(&[c, c, 1, 1], 0.5, 21),
            Tensor::from_vec(&[1], vec![0.3]).unwrap(),
        ];
        let err = grad_check(
            &move |tape, ids| {
                let ids_struct = BranchIds {
                    proj_weight: ids[1],
                    beta: ids[2],
                };
                let out = branch_attention(tape, ids[0], axis, &ids_struct)?;
                let w = tape.constant(rng_tensor(&[1, c, hw, hw], 1.0, 22));
                let weighted = tape.mul(out, w)?;
                tape.sum_all(weighted)
            },
            &inputs,
            GRADCHECK_EPS,
        )?;
        entries.push((name.to_string(), err, 0));
    }

    // Full tiny model end to end through the training loss.
    let config = ModelConfig::tiny();
    let store: ParamStore<f64> = init_params(&config, 77)?;
    let image = rng_tensor(&[1, 3, 8, 8], 0.5, 30).map(|v| v.abs());
    let gt = rng_tensor(&[1, 1, 2, 2], 0.5, 31).map(|v| v.abs());
    let names: Vec<String> = store.param_names().map(String::from).collect();
    let mut inputs: Vec<Tensor<f64>> = vec![image];
    for name in &names {
        inputs.push(store.param(name)?.value.clone());
    }
    let refined = grad_check_refined(
        &|tape, ids| {
            tape.set_train(true);
            let pairs: Vec<(String, NodeId)> = names
                .iter()
                .cloned()
                .zip(ids[1..].iter().copied())
                .collect();
            let binding = Binding::from_pairs(pairs);
            let pred = model_forward(tape, &binding, &store, &config, ids[0])?;
            let gt_node = tape.constant(gt.clone());
            euclidean_loss(tape, pred, gt_node, 1)
        },
        &inputs,
        GRADCHECK_EPS,
        1e-4,
    )?;
    entries.push((
        "full_tiny_model".to_string(),
        refined.worst.max_rel_err,
        refined.refined,
    ));

    Ok(GradCheckReport {
        entries,
        threshold: 1e-4,
    })
}
