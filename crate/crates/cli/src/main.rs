//! Command-line front end: benchmark generation, baseline and network
//! estimation, training, and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use normest::net::ModelConfig;
use normest::pipeline::{
    self, EstimateOptions, EstimationMode, EstimationRun, Model, Timing,
};
use normest::synthdata::{
    build_benchmark, manifest_path, read_cloud, write_normals, BenchmarkSpec, DatasetManifest,
    DensityMode, ShapeKind, Split,
};
use normest::train::TrainConfig;
use normest::{Error, ErrorCategory, PointCloud, Result};

#[derive(Parser)]
#[command(name = "normest", version, about = "Oriented point-cloud normal estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark with exact ground-truth normals.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated: sphere,torus,cube,cylinder,sheets
        #[arg(long, default_value = "sphere,torus,cube")]
        shapes: String,
        /// Comma-separated noise percentages of the bounding-box diagonal.
        #[arg(long, default_value = "0,0.12,0.6,1.2")]
        noise: String,
        /// Comma-separated: uniform,stripes,gradient
        #[arg(long, default_value = "uniform")]
        density: String,
        /// Surface samples per shape.
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Manifest split tag.
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Classical PCA + MST estimation.
    Baseline {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 16)]
        k_pca: usize,
        #[arg(long, default_value_t = 8)]
        k_graph: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the refinement network on a benchmark manifest.
    Train {
        /// Path to manifest.json; clouds are resolved relative to it.
        #[arg(long)]
        data: PathBuf,
        /// JSON file with optional "model" and "train" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Network estimation (optionally refining external normals).
    Estimate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Refine these normals instead of the PCA+MST initialization.
        #[arg(long)]
        init_normals: Option<PathBuf>,
        /// Only estimate the first N points.
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long, default_value_t = 16)]
        k_pca: usize,
        #[arg(long, default_value_t = 8)]
        k_graph: usize,
    },
    /// Evaluate predictions against a benchmark manifest.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Where to write the JSON report.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn parse_shapes(s: &str) -> Result<Vec<ShapeKind>> {
    s.split(',')
        .map(|name| match name.trim() {
            "sphere" => Ok(ShapeKind::Sphere { radius: 1.0 }),
            "torus" => Ok(ShapeKind::Torus {
                major: 1.0,
                minor: 0.3,
            }),
            "cube" => Ok(ShapeKind::Cube { edge: 2.0 }),
            "cylinder" => Ok(ShapeKind::Cylinder {
                radius: 1.0,
                height: 2.0,
            }),
            "sheets" => Ok(ShapeKind::Sheets {
                edge: 2.0,
                gap: 0.3,
                count: 3,
            }),
            other => Err(Error::InvalidArgument(format!("unknown shape '{}'", other))),
        })
        .collect()
}

fn parse_noise(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad noise level '{}'", v)))
        })
        .collect()
}

fn parse_density(s: &str) -> Result<Vec<DensityMode>> {
    s.split(',')
        .map(|name| match name.trim() {
            "uniform" => Ok(DensityMode::Uniform),
            "stripes" => Ok(DensityMode::Stripes),
            "gradient" => Ok(DensityMode::Gradient),
            other => Err(Error::InvalidArgument(format!(
                "unknown density mode '{}'",
                other
            ))),
        })
        .collect()
}

/// Accepts either a `<prefix>.xyz` path or the bare prefix.
fn cloud_prefix(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "xyz") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    }
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    read_cloud(&cloud_prefix(path))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn load_train_config(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    let Some(path) = path else {
        return Ok((ModelConfig::default(), TrainConfig::default()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: FileConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    Ok((
        file.model.unwrap_or_default(),
        file.train.unwrap_or_default(),
    ))
}

fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map_or_else(|| ".".into(), Path::to_path_buf)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            out,
            shapes,
            noise,
            density,
            n,
            seed,
            split,
        } => {
            let spec = BenchmarkSpec {
                shapes: parse_shapes(&shapes)?,
                noise_levels: parse_noise(&noise)?,
                densities: parse_density(&density)?,
                sample_count: n,
                seed,
                split: match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                },
            };
            let manifest = build_benchmark(&out, &spec)?;
            println!(
                "wrote {} entries to {}",
                manifest.entries.len(),
                manifest_path(&out).display()
            );
            Ok(())
        }
        Command::Baseline {
            input,
            k_pca,
            k_graph,
            out,
        } => {
            let cloud = load_cloud(&input)?;
            let field = pipeline::estimate_baseline(&cloud, k_pca, k_graph)?;
            write_normals(&field.normals, &out)?;
            println!("wrote {} normals to {}", field.normals.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            resume,
        } => {
            let manifest = DatasetManifest::load(&data)?;
            let root = manifest_root(&data);
            let (model_config, train_config) = load_train_config(config.as_deref())?;
            let outcome = normest::train::train(
                &manifest,
                &root,
                &model_config,
                &train_config,
                &out,
                resume.as_deref(),
            )?;
            if let Some((epoch, means)) = outcome.epoch_losses.last() {
                println!("epoch {}: mean loss {:.6}", epoch, means[0]);
            }
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
            Ok(())
        }
        Command::Estimate {
            input,
            ckpt,
            out,
            init_normals,
            subset,
            k_pca,
            k_graph,
        } => {
            let run = EstimationRun {
                input: input.clone(),
                checkpoint: Some(ckpt.clone()),
                mode: if init_normals.is_some() {
                    EstimationMode::RefineExternal
                } else {
                    EstimationMode::Network
                },
                init_normals: init_normals.clone(),
                output: out.clone(),
                timing: Timing::default(),
            };
            run.validate()?;
            let cloud = load_cloud(&input)?;
            let model = Model::load(&ckpt)?;
            let opts = EstimateOptions {
                k_pca,
                k_graph,
                seed: 0,
                subset,
            };
            let (field, timing) = match &init_normals {
                Some(path) => pipeline::refine_external(&cloud, path, &model, &opts)?,
                None => pipeline::estimate_network(&cloud, &model, &opts)?,
            };
            write_normals(&field.normals, &out)?;
            println!(
                "wrote {} normals to {} (init {:.2}s, inference {:.2}s)",
                field.normals.len(),
                out.display(),
                timing.init_seconds,
                timing.inference_seconds
            );
            Ok(())
        }
        Command::Eval {
            data,
            pred_dir,
            format,
            out,
        } => {
            let manifest = DatasetManifest::load(&data)?;
            let root = manifest_root(&data);
            let outcome = pipeline::evaluate(&manifest, &root, &pred_dir, "pred")?;
            std::fs::write(&out, outcome.report.to_json()?).map_err(|e| Error::io(&out, e))?;
            match format {
                Format::Table => print!("{}", outcome.report.to_table()),
                Format::Json => println!("{}", outcome.report.to_json()?),
            }
            if !outcome.missing.is_empty() {
                println!("missing predictions: {}", outcome.missing.join(", "));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(match e.category() {
                ErrorCategory::Data => 2,
                ErrorCategory::Numeric => 3,
            })
        }
    }
}
