//! `dsa-ltd`: command-line entry point for the DSA liver-tumor segmentation
//! pipeline. Subcommands cover dataset generation, key-frame selection,
//! motion-map extraction, training, evaluation, and the ablation study.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
//! Errors are single machine-parseable lines on standard error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dsa_ltd_core::dataset::{manifest_path, read_manifest, read_video_dir, write_frame_png, Split};
use dsa_ltd_core::harness::{canonical_variants, run_ablation};
use dsa_ltd_core::keyframe::{select_key_frame_windowed, DEFAULT_WINDOW};
use dsa_ltd_core::models::ModelPlan;
use dsa_ltd_core::motion;
use dsa_ltd_core::synthgen::{generate_dataset, PhantomConfig};
use dsa_ltd_core::train::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "dsa-ltd", version, about = "DSA video liver-tumor segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MotionKindArg {
    FrameDifference,
    OpticalFlow,
    BackgroundSubtraction,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset.
    GenData {
        /// Phantom configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Master seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Flat config override, repeatable (e.g. --override num_samples=8).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Overwrite an existing dataset in --out.
        #[arg(long)]
        force: bool,
    },
    /// Select the key frame of one video directory.
    SelectKeyframe {
        /// Directory holding frame_000.png, frame_001.png, ...
        #[arg(long)]
        video: PathBuf,
        /// Trailing window length to scan.
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
    },
    /// Compute a classical motion map for one frame and write it as PNG.
    ExtractMotion {
        /// Directory holding frame_000.png, frame_001.png, ...
        #[arg(long)]
        video: PathBuf,
        /// Frame index the map is anchored at.
        #[arg(long)]
        frame: usize,
        /// Motion detector to apply.
        #[arg(long, value_enum)]
        kind: MotionKindArg,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model variant on a generated dataset.
    Train {
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Training configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for logs and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Flat config override, repeatable (e.g. --override epochs=50 or
        /// --override weights.a=0.4).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Ablation variant to train.
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Score a checkpoint on one dataset split.
    Evaluate {
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to score.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full canonical ablation study.
    Ablate {
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Training configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for per-variant runs and reports.
        #[arg(long)]
        out: PathBuf,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Flat config override, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("error: config: {m}"),
            CliError::Runtime(m) => format!("error: runtime: {m}"),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(one_line(e))
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(one_line(e))
}

fn one_line(e: impl std::fmt::Display) -> String {
    e.to_string().replace('\n', " ")
}

/// Apply `key=value` overrides onto a JSON object. Dotted keys descend into
/// nested objects; values parse as JSON when possible, else as strings.
fn apply_overrides(root: &mut serde_json::Value, overrides: &[String]) -> Result<(), CliError> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {item:?} is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let segments: Vec<&str> = key.split('.').collect();
        let (last, parents) = segments.split_last().expect("split_once gave a key");
        let mut cursor = &mut *root;
        for seg in parents {
            cursor = cursor
                .as_object_mut()
                .ok_or_else(|| {
                    CliError::Config(format!("override key {key:?} crosses a non-object"))
                })?
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        cursor
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override key {key:?} crosses a non-object")))?
            .insert(last.to_string(), value);
    }
    Ok(())
}

/// Load a config JSON (or the type's defaults), apply the seed and overrides,
/// and deserialize strictly so unknown keys are rejected.
fn load_config<T: serde::de::DeserializeOwned + serde::Serialize + Default>(
    path: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<T, CliError> {
    let mut value = match path {
        Some(p) => {
            let bytes = std::fs::read(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_slice(&bytes).map_err(config_err)?
        }
        None => serde_json::to_value(T::default()).map_err(config_err)?,
    };
    if let Some(seed) = seed {
        apply_overrides(&mut value, &[format!("seed={seed}")])?;
    }
    apply_overrides(&mut value, overrides)?;
    serde_json::from_value(value).map_err(config_err)
}

fn plan_for_variant(name: &str) -> Result<ModelPlan, CliError> {
    canonical_variants()
        .into_iter()
        .find(|v| v.name == name)
        .map(|v| v.plan)
        .ok_or_else(|| {
            let names: Vec<String> = canonical_variants().into_iter().map(|v| v.name).collect();
            CliError::Config(format!(
                "unknown variant {name:?}; expected one of {}",
                names.join(", ")
            ))
        })
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData {
            config,
            out,
            seed,
            overrides,
            force,
        } => {
            let cfg: PhantomConfig = load_config(config.as_deref(), seed, &overrides)?;
            cfg.validate().map_err(config_err)?;
            if manifest_path(&out).exists() && !force {
                return Err(CliError::Config(format!(
                    "dataset already exists at {}; pass --force to overwrite",
                    out.display()
                )));
            }
            let manifest = generate_dataset(&cfg, &out).map_err(runtime_err)?;
            println!(
                "wrote {} samples ({} train / {} test) to {}",
                manifest.samples.len(),
                manifest.split_entries(Split::Train).len(),
                manifest.split_entries(Split::Test).len(),
                out.display()
            );
            Ok(())
        }
        Cmd::SelectKeyframe { video, window } => {
            let video = read_video_dir(&video).map_err(runtime_err)?;
            let result = select_key_frame_windowed(&video, window).map_err(runtime_err)?;
            println!("key_frame_index {}", result.index);
            for (idx, score) in &result.scores {
                println!("candidate {idx} score {score}");
            }
            Ok(())
        }
        Cmd::ExtractMotion {
            video,
            frame,
            kind,
            out,
        } => {
            let video = read_video_dir(&video).map_err(runtime_err)?;
            let map = match kind {
                MotionKindArg::FrameDifference => {
                    motion::frame_difference(&video, frame, dsa_ltd_core::imagery::FD_OFFSET)
                }
                MotionKindArg::OpticalFlow => motion::optical_flow_magnitude(&video, frame),
                MotionKindArg::BackgroundSubtraction => {
                    motion::background_subtraction(&video, frame, motion::DEFAULT_BG_ALPHA)
                }
            }
            .map_err(runtime_err)?;
            write_frame_png(&map.pixels, &out).map_err(runtime_err)?;
            println!("wrote motion map to {}", out.display());
            Ok(())
        }
        Cmd::Train {
            data,
            config,
            out,
            seed,
            overrides,
            variant,
        } => {
            let cfg: TrainConfig = load_config(config.as_deref(), seed, &overrides)?;
            cfg.validate().map_err(config_err)?;
            let plan = plan_for_variant(&variant)?;
            let manifest = read_manifest(&data).map_err(runtime_err)?;
            let outcome = train::train(&data, &manifest, &plan, &cfg, &out).map_err(runtime_err)?;
            println!(
                "trained {variant} for {} epochs, best val DICE {:.4}",
                outcome.epochs.len(),
                outcome.best_val_dice
            );
            println!("log {}", outcome.log_path.display());
            println!("best checkpoint {}", outcome.best_checkpoint.display());
            println!("final checkpoint {}", outcome.final_checkpoint.display());
            Ok(())
        }
        Cmd::Evaluate {
            data,
            checkpoint,
            split,
            out,
        } => {
            let manifest = read_manifest(&data).map_err(runtime_err)?;
            let result = train::evaluate(&data, &manifest, split.into(), &checkpoint)
                .map_err(runtime_err)?;
            for (id, dice) in &result.per_sample {
                println!("sample {id} dice {dice:.4}");
            }
            println!("mean_dice {:.4}", result.mean_dice);
            if let Some(path) = out {
                let bytes = serde_json::to_vec_pretty(&result).map_err(runtime_err)?;
                std::fs::write(&path, bytes)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            }
            Ok(())
        }
        Cmd::Ablate {
            data,
            config,
            out,
            seed,
            overrides,
        } => {
            let cfg: TrainConfig = load_config(config.as_deref(), seed, &overrides)?;
            cfg.validate().map_err(config_err)?;
            let manifest = read_manifest(&data).map_err(runtime_err)?;
            let variants = canonical_variants();
            let report =
                run_ablation(&data, &manifest, &variants, &cfg, &out).map_err(runtime_err)?;
            for v in &report.variants {
                match (v.mean_dice, &v.error) {
                    (Some(d), _) => println!("variant {} mean_dice {d:.4}", v.name),
                    (None, Some(e)) => println!("variant {} failed: {e}", v.name),
                    (None, None) => println!("variant {} produced no result", v.name),
                }
            }
            println!("report {}", out.join("results.json").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.message());
            ExitCode::from(e.code())
        }
    }
}
