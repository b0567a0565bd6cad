use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crowdcount::data::annotations::{parse_foreign_points, ForeignKind, INDEX_HEADER};
use crowdcount::data::save_dataset;
use crowdcount::error::Error;
use crowdcount::harness::{
    evaluate, generate_synth_dataset, gradcheck_report, predict, train, RunConfig,
};
use crowdcount::io::pnm::{read_image, write_density_pnm};
use crowdcount::io::weights::load_weights;
use crowdcount::model::init_params;

#[derive(Parser)]
#[command(
    name = "crowdcount",
    about = "Multi-level attentive crowd counting: training, evaluation and prediction on density maps",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Adam training loop described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: per-image counts plus MAE/MSE.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Aggregate over a k-fold partition of the dataset.
        #[arg(long)]
        kfold: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a density map for one image and print the count.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (8-bit PNM or PNG).
        image: PathBuf,
        /// Output density map (16-bit PNM).
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify reverse-mode gradients of every attention module and the
    /// tiny full model against central differences.
    Gradcheck {
        /// Optional run config; validated before the check runs.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic annotated dataset.
    Synth {
        /// JSON SynthConfig; omit for the default 64x64 scene settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(short = 'n', long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert foreign per-image point annotations to an index.
    Import {
        /// Point-list format of the per-image annotation files.
        #[arg(long, value_enum)]
        format: ImportFormat,
        /// Directory of images (stem-matched to annotation files).
        #[arg(long)]
        images: PathBuf,
        /// Directory of per-image point files.
        #[arg(long)]
        points: PathBuf,
        /// Index file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ImportFormat {
    Csv,
    Json,
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Numerical(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let outcome = train(&cfg)?;
            println!(
                "trained {} steps: loss {:.6e} -> {:.6e}",
                outcome.steps, outcome.initial_loss, outcome.final_loss
            );
            println!(
                "train-set mae={:.4} mse={:.4}",
                outcome.train_mae, outcome.train_mse
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("loss log:   {}", outcome.log_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            config,
            checkpoint,
            kfold,
            seed,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let report = evaluate(&cfg, &checkpoint, kfold)?;
            print!("{report}");
            if let Some(out) = out {
                std::fs::write(out, report)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict {
            config,
            checkpoint,
            image,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let mut store = init_params::<f64>(&cfg.model, cfg.seed)?;
            load_weights(&mut store, &checkpoint)?;
            let raster = read_image(&image)?;
            let prediction = predict(&cfg.model, &store, &raster.to_rgb_tensor())?;
            if prediction.padded {
                eprintln!(
                    "note: {}x{} image reflection-padded to a multiple of {}",
                    raster.width,
                    raster.height,
                    cfg.model.downsample()
                );
            }
            write_density_pnm(&out, &prediction.map, prediction.predicted_count)?;
            println!("count={:.6}", prediction.predicted_count);
            println!("map: {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { config } => {
            if let Some(path) = config {
                RunConfig::load(&path)?;
            }
            let report = gradcheck_report()?;
            print!("{}", report.to_text());
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Err(Error::Numerical(format!(
                    "gradient check failed: max relative error {:.3e} >= {:.1e}",
                    report.max_error(),
                    report.threshold
                )))
            }
        }
        Command::Synth {
            config,
            out,
            count,
            seed,
        } => {
            let synth_cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)?;
                    serde_json::from_str(&text).map_err(|e| {
                        Error::Config(format!("bad synth config {}: {e}", path.display()))
                    })?
                }
                None => crowdcount::harness::tiny_overfit_synth().0,
            };
            let samples = generate_synth_dataset(&synth_cfg, count, seed)?;
            let index = save_dataset(&out, &samples)?;
            println!("wrote {count} scenes, index: {}", index.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Import {
            format,
            images,
            points,
            out,
        } => {
            let kind = match format {
                ImportFormat::Csv => ForeignKind::Csv,
                ImportFormat::Json => ForeignKind::Json,
            };
            let written = import_annotations(kind, &images, &points, &out)?;
            println!("imported {written} records, index: {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Build an index from per-image point files matched to images by stem.
fn import_annotations(
    kind: ForeignKind,
    images_dir: &Path,
    points_dir: &Path,
    out: &Path,
) -> Result<usize, Error> {
    let mut point_files: Vec<PathBuf> = std::fs::read_dir(points_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    point_files.sort();
    if point_files.is_empty() {
        return Err(Error::Data(format!(
            "no annotation files in {}",
            points_dir.display()
        )));
    }
    let base = out.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(base)?;
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    let mut written = 0usize;
    for pf in point_files {
        let stem = pf
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let image_path = ["pnm", "png", "pgm", "ppm"]
            .iter()
            .map(|ext| images_dir.join(format!("{stem}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Data(format!("no image found for annotation '{stem}'")))?;
        let text = std::fs::read_to_string(&pf)?;
        let pts = parse_foreign_points(&text, kind)
            .map_err(|e| Error::Data(format!("{}: {e}", pf.display())))?;
        // Validate coordinates against the actual raster.
        let raster = read_image(&image_path)?;
        crowdcount::density::PointSet::validated(pts.clone(), raster.width, raster.height)
            .map_err(|e| Error::Data(format!("{}: {e}", pf.display())))?;
        let rel = pathdiff(base, &image_path);
        index.push_str(&format!("{rel}\t{}\t", pts.len()));
        for (i, (x, y)) in pts.iter().enumerate() {
            if i > 0 {
                index.push(' ');
            }
            index.push_str(&format!("{x:.4} {y:.4}"));
        }
        index.push('\n');
        written += 1;
    }
    std::fs::write(out, index)?;
    Ok(written)
}

/// Relative path from `base` to `target`, falling back to the absolute.
fn pathdiff(base: &Path, target: &Path) -> String {
    let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
    let target = target
        .canonicalize()
        .unwrap_or_else(|_| target.to_path_buf());
    match target.strip_prefix(&base) {
        Ok(rel) => rel.to_string_lossy().into_owned(),
        Err(_) => target.to_string_lossy().into_owned(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
