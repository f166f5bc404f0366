//! Ablation study harness: trains one model per variant on a shared seed,
//! scores every variant on the identical test set, and emits machine-readable
//! and plotted reports.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{manifest_path, DatasetManifest, Split};
use crate::error::{LtdError, Result};
use crate::imagery::{binarize, dice_score, BinaryMask};
use crate::models::ModelPlan;
use crate::motion::MotionKind;
use crate::train::{self, TrainConfig, TrainItem, DEFAULT_THRESHOLD};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;
/// Overlay images written per successful variant: 4 best plus 4 worst.
pub const OVERLAYS_PER_VARIANT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub plan: ModelPlan,
    /// Published clinical DICE for the analogous architecture, kept as
    /// context only; the private clinical data makes it unreproducible and
    /// nothing asserts against it.
    pub reference_dice: Option<f64>,
}

impl AblationVariant {
    fn new(name: &str, plan: ModelPlan, reference_dice: Option<f64>) -> Self {
        AblationVariant {
            name: name.to_string(),
            plan,
            reference_dice,
        }
    }
}

/// The eight canonical variants: the key-frame baseline, the three raw
/// motion-map fusions, TDL with and without supervision, LRS alone, and the
/// full assembly.
pub fn canonical_variants() -> Vec<AblationVariant> {
    let motion = |kind| ModelPlan {
        use_tdl: false,
        tdl_supervised: false,
        use_lrs: false,
        motion_input: Some(kind),
    };
    vec![
        AblationVariant::new("baseline-kf", ModelPlan::baseline(), Some(0.7075)),
        AblationVariant::new("kf-of", motion(MotionKind::OpticalFlowMagnitude), Some(0.6835)),
        AblationVariant::new("kf-fd", motion(MotionKind::FrameDifference), Some(0.7173)),
        AblationVariant::new("kf-bs", motion(MotionKind::BackgroundSubtraction), Some(0.6889)),
        AblationVariant::new(
            "kf-tdl-unsupervised",
            ModelPlan {
                use_tdl: true,
                tdl_supervised: false,
                use_lrs: false,
                motion_input: None,
            },
            Some(0.6990),
        ),
        AblationVariant::new(
            "kf-tdl-supervised",
            ModelPlan {
                use_tdl: true,
                tdl_supervised: true,
                use_lrs: false,
                motion_input: None,
            },
            Some(0.7232),
        ),
        AblationVariant::new(
            "ffs-lrs",
            ModelPlan {
                use_tdl: false,
                tdl_supervised: false,
                use_lrs: true,
                motion_input: None,
            },
            Some(0.7201),
        ),
        AblationVariant::new("full", ModelPlan::full(), Some(0.7368)),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub name: String,
    pub plan: ModelPlan,
    pub reference_dice: Option<f64>,
    pub mean_dice: Option<f64>,
    pub std_dice: Option<f64>,
    pub per_sample: Vec<(String, f64)>,
    pub train_log_path: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub dataset_hash: String,
    pub variants: Vec<VariantOutcome>,
}

/// FNV-1a over the manifest bytes, identifying the exact dataset scored.
pub fn dataset_hash(dataset_dir: &Path) -> Result<String> {
    let path = manifest_path(dataset_dir);
    let bytes = fs::read(&path).map_err(|e| LtdError::io(path.display().to_string(), e))?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in &bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{h:016x}"))
}

fn population_std(scores: &[(String, f64)], mean: f64) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    let var = scores
        .iter()
        .map(|(_, d)| (d - mean) * (d - mean))
        .sum::<f64>()
        / scores.len() as f64;
    var.sqrt()
}

fn run_variant(
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    variant: &AblationVariant,
    cfg: &TrainConfig,
    variant_dir: &Path,
) -> Result<(Vec<(String, f64)>, PathBuf)> {
    let outcome = train::train(dataset_dir, manifest, &variant.plan, cfg, variant_dir)?;
    let mut bundle = crate::models::load_checkpoint(&outcome.best_checkpoint)?;
    let items = train::load_split(dataset_dir, manifest, Split::Test, &variant.plan, false)?;
    if items.is_empty() {
        return Err(LtdError::InvalidArgument("test split is empty".into()));
    }
    let maps = train::predict(&mut bundle, &variant.plan, &items, cfg.batch_size)?;
    let mut scores = Vec::with_capacity(items.len());
    let mut masks = Vec::with_capacity(items.len());
    for (item, map) in items.iter().zip(maps.iter()) {
        let mask = binarize(map, DEFAULT_THRESHOLD)?;
        let dice = dice_score(&mask, &item.sample.tumor_mask)?;
        scores.push((item.sample.sample_id.clone(), dice));
        masks.push(mask);
    }
    write_overlays(&items, &masks, &scores, variant_dir)?;
    Ok((scores, outcome.log_path))
}

/// Train and score every variant with one shared seed and one shared test
/// set. A variant failure is recorded in its outcome; the run continues.
pub fn run_ablation(
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    variants: &[AblationVariant],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(LtdError::InvalidArgument("variant list is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| LtdError::io(out_dir.display().to_string(), e))?;
    let hash = dataset_hash(dataset_dir)?;
    let mut outcomes = Vec::with_capacity(variants.len());
    for variant in variants {
        let variant_dir = out_dir.join(&variant.name);
        let outcome = match run_variant(dataset_dir, manifest, variant, cfg, &variant_dir) {
            Ok((scores, log_path)) => {
                let mean = scores.iter().map(|(_, d)| d).sum::<f64>() / scores.len() as f64;
                // Stored relative to the report directory so reruns in
                // different locations stay byte-identical.
                let rel = log_path
                    .strip_prefix(out_dir)
                    .unwrap_or(&log_path)
                    .display()
                    .to_string();
                VariantOutcome {
                    name: variant.name.clone(),
                    plan: variant.plan,
                    reference_dice: variant.reference_dice,
                    mean_dice: Some(mean),
                    std_dice: Some(population_std(&scores, mean)),
                    per_sample: scores,
                    train_log_path: Some(rel),
                    error: None,
                }
            }
            Err(e) => VariantOutcome {
                name: variant.name.clone(),
                plan: variant.plan,
                reference_dice: variant.reference_dice,
                mean_dice: None,
                std_dice: None,
                per_sample: Vec::new(),
                train_log_path: None,
                error: Some(e.to_string()),
            },
        };
        outcomes.push(outcome);
    }
    let report = AblationReport {
        schema_version: RESULTS_SCHEMA_VERSION,
        dataset_hash: hash,
        variants: outcomes,
    };
    emit_report(&report, out_dir)?;
    Ok(report)
}

/// Write `results.json`, the table-shaped `results.csv`, and the DICE bar
/// chart. Byte-deterministic for a given report.
pub fn emit_report(report: &AblationReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| LtdError::io(out_dir.display().to_string(), e))?;
    let json_path = out_dir.join("results.json");
    fs::write(&json_path, serde_json::to_vec_pretty(report)?)
        .map_err(|e| LtdError::io(json_path.display().to_string(), e))?;

    let mut csv = String::from("method,mean_dice,std_dice,reference_dice,delta_vs_baseline\n");
    let baseline = report
        .variants
        .iter()
        .find(|v| v.name == "baseline-kf")
        .and_then(|v| v.mean_dice);
    for v in &report.variants {
        let fmt = |x: Option<f64>| x.map_or(String::new(), |x| format!("{x:.4}"));
        let delta = match (v.mean_dice, baseline) {
            (Some(m), Some(b)) => format!("{:+.4}", m - b),
            _ => String::new(),
        };
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            v.name,
            fmt(v.mean_dice),
            fmt(v.std_dice),
            fmt(v.reference_dice),
            delta
        ));
    }
    let csv_path = out_dir.join("results.csv");
    fs::write(&csv_path, csv).map_err(|e| LtdError::io(csv_path.display().to_string(), e))?;

    write_bar_chart(report, &out_dir.join("dice_bar_chart.png"))
}

fn write_bar_chart(report: &AblationReport, path: &Path) -> Result<()> {
    const W: u32 = 80;
    const GAP: u32 = 20;
    const PLOT_H: u32 = 300;
    const MARGIN: u32 = 30;
    let n = report.variants.len() as u32;
    let width = MARGIN * 2 + n * W + (n - 1) * GAP;
    let height = PLOT_H + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));

    // Axis line at DICE 0 and a reference line at 1.0.
    for x in MARGIN..width - MARGIN {
        img.put_pixel(x, height - MARGIN, Rgb([0, 0, 0]));
        img.put_pixel(x, MARGIN, Rgb([200, 200, 200]));
    }
    for (i, v) in report.variants.iter().enumerate() {
        let x0 = MARGIN + i as u32 * (W + GAP);
        let (dice, color) = match v.mean_dice {
            Some(d) => (d.clamp(0.0, 1.0), Rgb([60, 100, 200])),
            None => (0.02, Rgb([200, 60, 60])),
        };
        let bar_h = (dice * PLOT_H as f64).round() as u32;
        for x in x0..x0 + W {
            for y in height - MARGIN - bar_h..height - MARGIN {
                img.put_pixel(x, y, color);
            }
        }
    }
    img.save(path).map_err(|e| LtdError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn contour(mask: &BinaryMask) -> Array2<bool> {
    let px = mask.pixels();
    let (h, w) = px.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if px[[y, x]] == 0 {
            return false;
        }
        let neighbors = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        neighbors
            .into_iter()
            .any(|(ny, nx)| ny >= h || nx >= w || px[[ny, nx]] == 0)
    })
}

/// Key-frame overlays, ground-truth contour in green and predicted contour
/// in red, for the 4 best and 4 worst test samples.
fn write_overlays(
    items: &[TrainItem],
    predictions: &[BinaryMask],
    scores: &[(String, f64)],
    variant_dir: &Path,
) -> Result<()> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .1
            .partial_cmp(&scores[a].1)
            .unwrap()
            .then(scores[a].0.cmp(&scores[b].0))
    });
    let take = OVERLAYS_PER_VARIANT / 2;
    let mut picks: Vec<(&'static str, usize, usize)> = Vec::new();
    for (rank, &idx) in order.iter().take(take.min(order.len())).enumerate() {
        picks.push(("best", rank, idx));
    }
    let worst_count = take.min(order.len().saturating_sub(picks.len()));
    for (rank, &idx) in order.iter().rev().take(worst_count).enumerate() {
        picks.push(("worst", rank, idx));
    }

    for (tag, rank, idx) in picks {
        let item = &items[idx];
        let frame = item.sample.video.frame(item.sample.key_frame_index);
        let (h, w) = frame.dim();
        let mut img = RgbImage::new(w as u32, h as u32);
        for ((y, x), &v) in frame.pixels().indexed_iter() {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([g, g, g]));
        }
        let gt = contour(&item.sample.tumor_mask);
        let pred = contour(&predictions[idx]);
        for ((y, x), &on) in gt.indexed_iter() {
            if on {
                img.put_pixel(x as u32, y as u32, Rgb([0, 220, 0]));
            }
        }
        for ((y, x), &on) in pred.indexed_iter() {
            if on {
                img.put_pixel(x as u32, y as u32, Rgb([230, 0, 0]));
            }
        }
        let path = variant_dir.join(format!(
            "overlay_{tag}_{rank}_{}.png",
            item.sample.sample_id
        ));
        img.save(&path).map_err(|e| LtdError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}
