//! Co-training of the three networks: TDL warmup on the frame-difference
//! target, then joint optimization of the weighted total loss, with the
//! key-frame +1/+2 augmentation and a cosine-annealed learning rate.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_sample, DatasetManifest, Split};
use crate::error::{LtdError, Result};
use crate::exec;
use crate::imagery::{binarize, dice_score, validate_sample, ProbabilityMap, Sample, FD_OFFSET};
use crate::losses::{LossReport, LossWeights};
use crate::models::{
    load_checkpoint, save_checkpoint, tdl_input_stack, ModelBundle, ModelPlan, ParamBinding,
};
use crate::motion::{self, MotionKind};
use crate::nn::{adam_step, NodeId, Tape};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
    /// Accepted for config compatibility; execution falls back to CPU.
    Accelerator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_min: f64,
    pub weights: LossWeights,
    pub tdl_warmup_epochs: usize,
    pub seed: u64,
    pub device: Device,
    pub base_width: usize,
    pub depth: usize,
    /// Fraction of train samples held out for validation, by id hash.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 150,
            initial_lr: 0.001,
            lr_min: 0.0,
            weights: LossWeights::default(),
            tdl_warmup_epochs: 10,
            seed: 0,
            device: Device::Cpu,
            base_width: 16,
            depth: 4,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LtdError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(LtdError::Config("epochs must be at least 1".into()));
        }
        if !(self.initial_lr > 0.0) {
            return Err(LtdError::Config("initial_lr must be positive".into()));
        }
        if self.lr_min < 0.0 || self.lr_min > self.initial_lr {
            return Err(LtdError::Config("lr_min must lie in [0, initial_lr]".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(LtdError::Config("validation_fraction must lie in [0, 1)".into()));
        }
        self.weights.validate()
    }
}

/// Cosine-annealed learning rate:
/// `lr_min + (initial_lr - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(LtdError::InvalidArgument(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(cfg.initial_lr);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(cfg.lr_min + (cfg.initial_lr - cfg.lr_min) * (1.0 + phase.cos()) / 2.0)
}

/// One sample loaded for training, with its admissible key-frame draws and
/// any precomputed raw motion maps (one per draw).
pub struct TrainItem {
    pub sample: Sample,
    pub draw_frames: Vec<usize>,
    motion_maps: Vec<Option<Array2<f64>>>,
}

/// Load a manifest split into memory. Training items include the `k+1`,
/// `k+2` augmentation draws; evaluation items only the key frame.
pub fn load_split(
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    plan: &ModelPlan,
    augment: bool,
) -> Result<Vec<TrainItem>> {
    let entries = manifest.split_entries(split);
    let loaded = exec::map_indexed(exec::default_mode(), entries.len(), |i| {
        let entry = entries[i];
        let sample = load_sample(dataset_dir, entry)?;
        let violations = validate_sample(&sample);
        if !violations.is_empty() {
            return Err(LtdError::InvalidSample {
                sample_id: entry.id.clone(),
                violations,
            });
        }
        let mut draw_frames = vec![entry.key_frame_index];
        if augment {
            for &aug in &entry.aug_frame_indices {
                if aug < sample.video.frame_count() {
                    draw_frames.push(aug);
                }
            }
        }
        let motion_maps = draw_frames
            .iter()
            .map(|&j| match plan.motion_input {
                None => Ok(None),
                Some(MotionKind::FrameDifference) => {
                    Ok(Some(motion::frame_difference(&sample.video, j, FD_OFFSET)?.pixels))
                }
                Some(MotionKind::OpticalFlowMagnitude) => {
                    Ok(Some(motion::optical_flow_magnitude(&sample.video, j)?.pixels))
                }
                Some(MotionKind::BackgroundSubtraction) => Ok(Some(
                    motion::background_subtraction(&sample.video, j, motion::DEFAULT_BG_ALPHA)?
                        .pixels,
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainItem {
            sample,
            draw_frames,
            motion_maps,
        })
    });
    loaded.into_iter().collect()
}

fn id_hash(id: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Split train items into (train, validation) by id hash.
fn hold_out_validation(items: Vec<TrainItem>, fraction: f64) -> (Vec<TrainItem>, Vec<TrainItem>) {
    if fraction <= 0.0 {
        return (items, Vec::new());
    }
    let buckets = (1.0 / fraction).round().max(2.0) as u64;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for item in items {
        if id_hash(&item.sample.sample_id) % buckets == 0 {
            val.push(item);
        } else {
            train.push(item);
        }
    }
    if train.is_empty() {
        // Degenerate tiny datasets: keep everything trainable.
        train = val;
        val = Vec::new();
    }
    (train, val)
}

struct Batch {
    key_frame: Array4<f64>,
    stack: Option<Array4<f64>>,
    fd_target: Option<Array4<f64>>,
    motion: Option<Array4<f64>>,
    liver_target: Option<Array4<f64>>,
    tumor_target: Array4<f64>,
}

fn assemble_batch(items: &[TrainItem], draws: &[(usize, usize)], plan: &ModelPlan) -> Result<Batch> {
    let b = draws.len();
    let (h, w) = items[draws[0].0].sample.video.dim();
    let mut key_frame = Array4::zeros((b, 1, h, w));
    let mut stack = plan.use_tdl.then(|| Array4::zeros((b, 10, h, w)));
    let mut fd_target = plan.use_tdl.then(|| Array4::zeros((b, 1, h, w)));
    let mut motion_arr = plan.motion_input.map(|_| Array4::zeros((b, 1, h, w)));
    let mut liver_target = plan.use_lrs.then(|| Array4::zeros((b, 1, h, w)));
    let mut tumor_target = Array4::zeros((b, 1, h, w));

    for (slot, &(item_idx, draw_idx)) in draws.iter().enumerate() {
        let item = &items[item_idx];
        let j = item.draw_frames[draw_idx];
        key_frame
            .index_axis_mut(Axis(0), slot)
            .index_axis_mut(Axis(0), 0)
            .assign(item.sample.video.frame(j).pixels());
        if let Some(stack) = stack.as_mut() {
            let s = tdl_input_stack(&item.sample, j)?;
            stack
                .index_axis_mut(Axis(0), slot)
                .assign(&s.index_axis(Axis(0), 0));
        }
        if let Some(fd) = fd_target.as_mut() {
            let map = motion::frame_difference(&item.sample.video, j, FD_OFFSET)?;
            fd.index_axis_mut(Axis(0), slot)
                .index_axis_mut(Axis(0), 0)
                .assign(&map.pixels);
        }
        if let Some(m) = motion_arr.as_mut() {
            let map = item.motion_maps[draw_idx]
                .as_ref()
                .expect("motion map precomputed for plan");
            m.index_axis_mut(Axis(0), slot)
                .index_axis_mut(Axis(0), 0)
                .assign(map);
        }
        if let Some(liver) = liver_target.as_mut() {
            liver
                .index_axis_mut(Axis(0), slot)
                .index_axis_mut(Axis(0), 0)
                .assign(&item.sample.liver_mask.to_f64());
        }
        tumor_target
            .index_axis_mut(Axis(0), slot)
            .index_axis_mut(Axis(0), 0)
            .assign(&item.sample.tumor_mask.to_f64());
    }
    Ok(Batch {
        key_frame,
        stack,
        fd_target,
        motion: motion_arr,
        liver_target,
        tumor_target,
    })
}

/// Forward the plan's graph on one batch. Returns the segmentation output
/// node plus optional TDL/LRS outputs and the binding of parameters used.
fn plan_forward(
    bundle: &mut ModelBundle,
    plan: &ModelPlan,
    tape: &mut Tape,
    batch: &Batch,
    train: bool,
) -> Result<(NodeId, Option<NodeId>, Option<NodeId>, ParamBinding)> {
    let mut binding = ParamBinding::new();
    let kf = tape.leaf(batch.key_frame.clone());
    let mut fusion_inputs = vec![kf];

    let (store, tdl, lrs, ffs) = bundle.parts_mut();

    let tdl_out = if plan.use_tdl {
        let stack = tape.leaf(batch.stack.clone().expect("stack assembled"));
        let net = tdl.expect("plan requires TDL net");
        let out = net.forward(store, tape, stack, train, &mut binding)?;
        fusion_inputs.push(out);
        Some(out)
    } else {
        None
    };
    if let Some(m) = &batch.motion {
        fusion_inputs.push(tape.leaf(m.clone()));
    }
    let lrs_out = if plan.use_lrs {
        let net = lrs.expect("plan requires LRS net");
        let out = net.forward(store, tape, kf, train, &mut binding)?;
        fusion_inputs.push(out);
        Some(out)
    } else {
        None
    };
    let fused = tape.concat_channels(&fusion_inputs)?;
    let seg = ffs.forward(store, tape, fused, train, &mut binding)?;
    Ok((seg, tdl_out, lrs_out, binding))
}

struct StepOutcome {
    report: LossReport,
}

/// One joint optimization step over a batch.
fn joint_step(
    bundle: &mut ModelBundle,
    plan: &ModelPlan,
    batch: &Batch,
    weights: &LossWeights,
    lr: f64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new(exec::default_mode());
    let (seg, tdl_out, lrs_out, binding) = plan_forward(bundle, plan, &mut tape, batch, true)?;

    let mut terms = Vec::new();
    let l_ltd = if let Some(tdl_out) = tdl_out {
        let node = tape.l1_loss(tdl_out, batch.fd_target.clone().expect("fd target"))?;
        let coef = if plan.tdl_supervised { weights.lambda0 } else { 0.0 };
        terms.push((node, coef));
        tape.scalar(node)
    } else {
        0.0
    };
    let l_lrs = if let Some(lrs_out) = lrs_out {
        let target = batch.liver_target.clone().expect("liver target");
        let bce = tape.bce_loss(lrs_out, target.clone())?;
        let dice = tape.soft_dice_loss(lrs_out, target)?;
        let node = tape.weighted_sum(&[(bce, weights.a), (dice, 1.0 - weights.a)]);
        terms.push((node, weights.lambda1));
        tape.scalar(node)
    } else {
        0.0
    };
    let seg_bce = tape.bce_loss(seg, batch.tumor_target.clone())?;
    let seg_dice = tape.soft_dice_loss(seg, batch.tumor_target.clone())?;
    let l_seg_node = tape.weighted_sum(&[(seg_bce, weights.a), (seg_dice, 1.0 - weights.a)]);
    terms.push((l_seg_node, 1.0));
    let l_seg = tape.scalar(l_seg_node);
    let total_node = tape.weighted_sum(&terms);
    let total = tape.scalar(total_node);
    if !total.is_finite() {
        return Err(LtdError::NonFiniteLoss { step: bundle.step });
    }

    let grads = tape.backward(total_node);
    bundle.step += 1;
    let t = bundle.step;
    for (pid, nid) in binding {
        let entry = bundle.store.get_mut(pid);
        if !entry.trainable {
            continue;
        }
        if let Some(grad) = grads.get(nid) {
            let value = &mut entry.value;
            let adam = &mut entry.adam;
            adam_step(value, adam, grad, lr, t);
        }
    }

    Ok(StepOutcome {
        report: LossReport {
            l_ltd,
            l_lrs,
            l_seg,
            total,
        },
    })
}

/// One TDL-only warmup step minimizing the frame-difference L1.
fn warmup_step(bundle: &mut ModelBundle, batch: &Batch, lr: f64) -> Result<f64> {
    let mut tape = Tape::new(exec::default_mode());
    let mut binding = ParamBinding::new();
    let stack = tape.leaf(batch.stack.clone().expect("stack assembled"));
    let (store, tdl, _, _) = bundle.parts_mut();
    let net = tdl.expect("warmup requires TDL net");
    let out = net.forward(store, &mut tape, stack, true, &mut binding)?;
    let loss_node = tape.l1_loss(out, batch.fd_target.clone().expect("fd target"))?;
    let loss = tape.scalar(loss_node);
    if !loss.is_finite() {
        return Err(LtdError::NonFiniteLoss { step: bundle.step });
    }
    let grads = tape.backward(loss_node);
    bundle.step += 1;
    let t = bundle.step;
    for (pid, nid) in binding {
        let entry = bundle.store.get_mut(pid);
        if !entry.trainable {
            continue;
        }
        if let Some(grad) = grads.get(nid) {
            adam_step(&mut entry.value, &mut entry.adam, grad, lr, t);
        }
    }
    Ok(loss)
}

/// Mean TDL L1 loss over all items, without updating anything.
fn mean_tdl_loss(bundle: &mut ModelBundle, plan: &ModelPlan, items: &[TrainItem], batch_size: usize) -> Result<f64> {
    let draws: Vec<(usize, usize)> = items.iter().enumerate().map(|(i, _)| (i, 0)).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in draws.chunks(batch_size) {
        let batch = assemble_batch(items, chunk, plan)?;
        let mut tape = Tape::new(exec::default_mode());
        let mut binding = ParamBinding::new();
        let stack = tape.leaf(batch.stack.clone().expect("stack"));
        let (store, tdl, _, _) = bundle.parts_mut();
        let net = tdl.expect("TDL net");
        let out = net.forward(store, &mut tape, stack, false, &mut binding)?;
        let loss = tape.l1_loss(out, batch.fd_target.clone().expect("fd"))?;
        total += tape.scalar(loss) * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Eval-mode segmentation probability maps over items at their true key
/// frames, in item order.
pub fn predict(
    bundle: &mut ModelBundle,
    plan: &ModelPlan,
    items: &[TrainItem],
    batch_size: usize,
) -> Result<Vec<ProbabilityMap>> {
    let draws: Vec<(usize, usize)> = items.iter().enumerate().map(|(i, _)| (i, 0)).collect();
    let mut out = Vec::with_capacity(items.len());
    for chunk in draws.chunks(batch_size) {
        let batch = assemble_batch(items, chunk, plan)?;
        let mut tape = Tape::new(exec::default_mode());
        let (seg, _, _, _) = plan_forward(bundle, plan, &mut tape, &batch, false)?;
        let probs = tape.value(seg);
        for slot in 0..chunk.len() {
            let plane = probs
                .index_axis(Axis(0), slot)
                .index_axis(Axis(0), 0)
                .mapv(|v| v.clamp(0.0, 1.0));
            out.push(ProbabilityMap::new(plane)?);
        }
    }
    Ok(out)
}

/// Eval-mode segmentation DICE over items at their true key frames.
pub fn mean_dice(
    bundle: &mut ModelBundle,
    plan: &ModelPlan,
    items: &[TrainItem],
    batch_size: usize,
    threshold: f64,
) -> Result<Vec<(String, f64)>> {
    let maps = predict(bundle, plan, items, batch_size)?;
    items
        .iter()
        .zip(maps.iter())
        .map(|(item, map)| {
            let mask = binarize(map, threshold)?;
            let dice = dice_score(&mask, &item.sample.tumor_mask)?;
            Ok((item.sample.sample_id.clone(), dice))
        })
        .collect()
}

fn mean_of(scores: &[(String, f64)]) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    scores.iter().map(|(_, d)| d).sum::<f64>() / scores.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub l_ltd: f64,
    pub l_lrs: f64,
    pub l_seg: f64,
    pub total: f64,
    pub train_dice: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub epochs: Vec<EpochRow>,
    pub steps_per_epoch: usize,
    pub warmup_initial_l_ltd: Option<f64>,
    pub warmup_final_l_ltd: Option<f64>,
    pub best_val_dice: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,l_ltd,l_lrs,l_seg,total,train_dice,val_dice";

/// Train a plan's model on the manifest's train split.
///
/// Phase 1 (when the plan supervises TDL): `tdl_warmup_epochs` of TDL-only
/// optimization of the L1 frame-difference loss. Phase 2: joint optimization
/// of the weighted total over all present networks, drawing training frames
/// from `{k, k+1, k+2}` and annealing the learning rate per epoch.
pub fn train(
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    plan: &ModelPlan,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    plan.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| LtdError::io(out_dir.display().to_string(), e))?;

    let all_train = load_split(dataset_dir, manifest, Split::Train, plan, true)?;
    if all_train.is_empty() {
        return Err(LtdError::InvalidArgument("train split is empty".into()));
    }
    let (train_items, val_items) = hold_out_validation(all_train, cfg.validation_fraction);

    let mut bundle = ModelBundle::for_plan(*plan, cfg.base_width, cfg.depth, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5f5f_5f5f);

    // Echo the resolved configuration next to the log.
    let cfg_path = out_dir.join("train_config.json");
    fs::write(
        &cfg_path,
        serde_json::to_vec_pretty(&serde_json::json!({
            "plan": plan,
            "train": cfg,
        }))?,
    )
    .map_err(|e| LtdError::io(cfg_path.display().to_string(), e))?;

    let mut all_draws: Vec<(usize, usize)> = train_items
        .iter()
        .enumerate()
        .flat_map(|(i, item)| (0..item.draw_frames.len()).map(move |d| (i, d)))
        .collect();
    let steps_per_epoch = all_draws.len().div_ceil(cfg.batch_size);

    // Phase 1: TDL warmup.
    let (mut warmup_initial, mut warmup_final) = (None, None);
    if plan.use_tdl && plan.tdl_supervised && cfg.tdl_warmup_epochs > 0 {
        warmup_initial = Some(mean_tdl_loss(&mut bundle, plan, &train_items, cfg.batch_size)?);
        for _ in 0..cfg.tdl_warmup_epochs {
            all_draws.shuffle(&mut rng);
            for chunk in all_draws.chunks(cfg.batch_size) {
                let batch = assemble_batch(&train_items, chunk, plan)?;
                warmup_step(&mut bundle, &batch, cfg.initial_lr)?;
            }
        }
        warmup_final = Some(mean_tdl_loss(&mut bundle, plan, &train_items, cfg.batch_size)?);
    }

    // Phase 2: joint co-training.
    let log_path = out_dir.join("training_log.csv");
    let mut log = fs::File::create(&log_path)
        .map_err(|e| LtdError::io(log_path.display().to_string(), e))?;
    writeln!(log, "{LOG_HEADER}").map_err(|e| LtdError::io(log_path.display().to_string(), e))?;

    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let mut best_val = f64::NEG_INFINITY;
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg)?;
        all_draws.shuffle(&mut rng);
        let mut sums = LossReport {
            l_ltd: 0.0,
            l_lrs: 0.0,
            l_seg: 0.0,
            total: 0.0,
        };
        let mut batches = 0usize;
        for chunk in all_draws.chunks(cfg.batch_size) {
            let batch = assemble_batch(&train_items, chunk, plan)?;
            let outcome = joint_step(&mut bundle, plan, &batch, &cfg.weights, lr)?;
            sums.l_ltd += outcome.report.l_ltd;
            sums.l_lrs += outcome.report.l_lrs;
            sums.l_seg += outcome.report.l_seg;
            sums.total += outcome.report.total;
            batches += 1;
        }
        let n = batches as f64;
        let train_scores = mean_dice(&mut bundle, plan, &train_items, cfg.batch_size, DEFAULT_THRESHOLD)?;
        let val_scores = if val_items.is_empty() {
            train_scores.clone()
        } else {
            mean_dice(&mut bundle, plan, &val_items, cfg.batch_size, DEFAULT_THRESHOLD)?
        };
        let row = EpochRow {
            epoch,
            lr,
            l_ltd: sums.l_ltd / n,
            l_lrs: sums.l_lrs / n,
            l_seg: sums.l_seg / n,
            total: sums.total / n,
            train_dice: mean_of(&train_scores),
            val_dice: mean_of(&val_scores),
        };
        writeln!(
            log,
            "{},{},{},{},{},{},{},{}",
            row.epoch, row.lr, row.l_ltd, row.l_lrs, row.l_seg, row.total, row.train_dice, row.val_dice
        )
        .map_err(|e| LtdError::io(log_path.display().to_string(), e))?;
        if row.val_dice > best_val {
            best_val = row.val_dice;
            save_checkpoint(&bundle, &best_path)?;
        }
        rows.push(row);
    }
    save_checkpoint(&bundle, &final_path)?;
    if best_val == f64::NEG_INFINITY {
        save_checkpoint(&bundle, &best_path)?;
        best_val = f64::NAN;
    }

    Ok(TrainOutcome {
        log_path,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        epochs: rows,
        steps_per_epoch,
        warmup_initial_l_ltd: warmup_initial,
        warmup_final_l_ltd: warmup_final,
        best_val_dice: best_val,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_sample: Vec<(String, f64)>,
    pub mean_dice: f64,
}

/// Evaluate a checkpoint on one manifest split: eval-mode forward on each
/// sample's true key frame, binarized at 0.5, per-sample DICE plus mean.
pub fn evaluate(
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    checkpoint: &Path,
) -> Result<EvalResult> {
    let mut bundle = load_checkpoint(checkpoint)?;
    let plan = bundle.configs().plan;
    evaluate_bundle(dataset_dir, manifest, split, &mut bundle, &plan)
}

/// As [`evaluate`], over an already loaded bundle.
pub fn evaluate_bundle(
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    bundle: &mut ModelBundle,
    plan: &ModelPlan,
) -> Result<EvalResult> {
    let items = load_split(dataset_dir, manifest, split, plan, false)?;
    if items.is_empty() {
        return Err(LtdError::InvalidArgument(format!(
            "split {split:?} is empty"
        )));
    }
    let per_sample = mean_dice(bundle, plan, &items, 8, DEFAULT_THRESHOLD)?;
    let mean = mean_of(&per_sample);
    Ok(EvalResult {
        per_sample,
        mean_dice: mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, PhantomConfig};

    fn tiny_dataset(dir: &Path, n: usize) -> DatasetManifest {
        let cfg = PhantomConfig {
            num_samples: n,
            height: 32,
            width: 32,
            frame_count: 20,
            washin_midpoint_range: (10, 14),
            tumors_per_sample_range: (1, 2),
            train_fraction: 0.75,
            ..PhantomConfig::default()
        };
        generate_dataset(&cfg, dir).unwrap()
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            tdl_warmup_epochs: 1,
            base_width: 4,
            depth: 2,
            batch_size: 4,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, 150, &cfg).unwrap(), 0.001);
        assert!(cosine_lr(150, 150, &cfg).unwrap().abs() < 1e-18);
        assert!((cosine_lr(75, 150, &cfg).unwrap() - 0.0005).abs() < 1e-12);
        assert!(cosine_lr(151, 150, &cfg).is_err());
    }

    #[test]
    fn step_count_matches_augmented_draws() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 8);
        let n_train = manifest.split_entries(Split::Train).len();
        let cfg = TrainConfig {
            epochs: 1,
            tdl_warmup_epochs: 0,
            batch_size: 8,
            ..fast_cfg()
        };
        let outcome = train(
            dir.path(),
            &manifest,
            &ModelPlan::full(),
            &cfg,
            out.path(),
        )
        .unwrap();
        // Augmentation triples the train draws.
        assert_eq!(outcome.steps_per_epoch, (n_train * 3).div_ceil(8));
    }

    #[test]
    fn deterministic_runs_produce_identical_logs() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 4);
        let cfg = fast_cfg();
        let run = || {
            let out = tempfile::tempdir().unwrap();
            let outcome = train(
                dir.path(),
                &manifest,
                &ModelPlan::full(),
                &cfg,
                out.path(),
            )
            .unwrap();
            std::fs::read_to_string(&outcome.log_path).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn warmup_lowers_tdl_loss_and_log_matches_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 4);
        let cfg = TrainConfig {
            epochs: 3,
            tdl_warmup_epochs: 3,
            ..fast_cfg()
        };
        let outcome = train(
            dir.path(),
            &manifest,
            &ModelPlan::full(),
            &cfg,
            out.path(),
        )
        .unwrap();
        assert!(outcome.warmup_final_l_ltd.unwrap() < outcome.warmup_initial_l_ltd.unwrap());
        for row in &outcome.epochs {
            assert_eq!(row.lr, cosine_lr(row.epoch, cfg.epochs, &cfg).unwrap());
        }
        let log = std::fs::read_to_string(&outcome.log_path).unwrap();
        assert!(log.starts_with(LOG_HEADER));
        assert_eq!(log.lines().count(), 1 + cfg.epochs);
    }

    #[test]
    fn evaluate_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 4);
        let outcome = train(
            dir.path(),
            &manifest,
            &ModelPlan::full(),
            &fast_cfg(),
            out.path(),
        )
        .unwrap();
        let eval = evaluate(dir.path(), &manifest, Split::Test, &outcome.final_checkpoint).unwrap();
        assert!(!eval.per_sample.is_empty());
        assert!((0.0..=1.0).contains(&eval.mean_dice));
        let recomputed = mean_of(&eval.per_sample);
        assert!((eval.mean_dice - recomputed).abs() < 1e-9);
    }

    #[test]
    fn zeroed_head_predicts_all_ones_dice() {
        // Uniform 0.5 maps binarize (inclusive threshold) to all-ones, so
        // the DICE equals that of the trivial all-ones predictor, which is
        // computable in closed form from the mask area.
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 4);
        let plan = ModelPlan::full();
        let mut bundle = ModelBundle::for_plan(plan, 4, 2, 0).unwrap();
        crate::models::zero_ffs_head(&mut bundle);
        let eval = evaluate_bundle(dir.path(), &manifest, Split::Test, &mut bundle, &plan).unwrap();
        let items = load_split(dir.path(), &manifest, Split::Test, &plan, false).unwrap();
        for ((id, dice), item) in eval.per_sample.iter().zip(items.iter()) {
            assert_eq!(id, &item.sample.sample_id);
            let area = item.sample.tumor_mask.area() as f64;
            let total = (item.sample.tumor_mask.dim().0 * item.sample.tumor_mask.dim().1) as f64;
            let expected = 2.0 * area / (area + total);
            assert!((dice - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn unsupervised_tdl_keeps_fusion_gradient_path() {
        // With lambda0 forced off, TDL parameters still move because its
        // output feeds the fusion network.
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 4);
        let plan = ModelPlan {
            use_tdl: true,
            tdl_supervised: false,
            use_lrs: false,
            motion_input: None,
        };
        let cfg = TrainConfig {
            epochs: 1,
            tdl_warmup_epochs: 0,
            ..fast_cfg()
        };
        let outcome = train(dir.path(), &manifest, &plan, &cfg, out.path()).unwrap();
        let trained = load_checkpoint(&outcome.final_checkpoint).unwrap();
        let fresh = ModelBundle::for_plan(plan, cfg.base_width, cfg.depth, cfg.seed).unwrap();
        let tdl_weight = fresh.store.find("tdl.enc0.conv1.weight").unwrap();
        assert_ne!(
            trained.store.get(tdl_weight).value,
            fresh.store.get(tdl_weight).value
        );
    }
}
