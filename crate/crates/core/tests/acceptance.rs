//! Acceptance gate: one test per criterion, each printing a single
//! `ACCEPTANCE <n> <name>: PASS|FAIL` line. Criteria 7 and 8 train real
//! models and dominate the runtime; they are serialized on a shared lock so
//! wall-clock limits are meaningful on a single CPU.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use dsa_ltd_core::exec::ExecMode;
use dsa_ltd_core::imagery::{dice_score, BinaryMask, DsaVideo, Frame, FD_OFFSET};
use dsa_ltd_core::keyframe::{select_key_frame, DEFAULT_WINDOW};
use dsa_ltd_core::losses::{self, LossWeights};
use dsa_ltd_core::models::{ModelBundle, ModelPlan, TDL_STACK};
use dsa_ltd_core::motion::frame_difference;
use dsa_ltd_core::nn::Tape;
use dsa_ltd_core::synthgen::{generate_dataset, PhantomConfig};
use dsa_ltd_core::train::{self, TrainConfig};

static TRAINING_LOCK: Mutex<()> = Mutex::new(());

fn report(n: usize, name: &str, outcome: Result<(), String>, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    let outcome = outcome.and_then(|()| {
        if elapsed <= budget {
            Ok(())
        } else {
            Err(format!("exceeded budget {budget:?} (took {elapsed:?})"))
        }
    });
    match outcome {
        Ok(()) => println!("ACCEPTANCE {n} {name}: PASS ({elapsed:?})"),
        Err(msg) => {
            println!("ACCEPTANCE {n} {name}: FAIL ({msg})");
            panic!("acceptance criterion {n} ({name}) failed: {msg}");
        }
    }
}

fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    BinaryMask::new(Array2::from_shape_fn((h, w), |_| u8::from(rng.gen_bool(0.3)))).unwrap()
}

/// Independent set-counting DICE: positions as sets, 2|A∩B| / (|A|+|B|).
fn dice_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let set = |m: &BinaryMask| -> BTreeSet<(usize, usize)> {
        m.pixels()
            .indexed_iter()
            .filter(|(_, &v)| v == 1)
            .map(|(pos, _)| pos)
            .collect()
    };
    let (sa, sb) = (set(a), set(b));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

#[test]
fn criterion_1_metric_oracle() {
    let started = Instant::now();
    let run = || -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..1000 {
            let a = random_mask(&mut rng, 16, 16);
            let b = random_mask(&mut rng, 16, 16);
            let ours = dice_score(&a, &b).map_err(|e| e.to_string())?;
            let oracle = dice_oracle(&a, &b);
            if (ours - oracle).abs() > 1e-12 {
                return Err(format!("pair {i}: {ours} vs oracle {oracle}"));
            }
        }
        Ok(())
    };
    report(1, "metric-oracle", run(), started, Duration::from_secs(10));
}

#[test]
fn criterion_2_loss_correctness() {
    let started = Instant::now();
    let run = || -> Result<(), String> {
        let err = |e: dsa_ltd_core::LtdError| e.to_string();
        // Closed forms on 8x8 grids.
        let p_const = Array2::from_elem((8, 8), 0.3);
        let t_const = Array2::from_elem((8, 8), 0.8);
        let l1 = losses::l1_loss(&p_const, &t_const).map_err(err)?;
        if (l1 - 0.5).abs() > 1e-9 {
            return Err(format!("l1 constant case: {l1} vs 0.5"));
        }
        let half = Array2::from_elem((8, 8), 0.5);
        let ones = Array2::from_elem((8, 8), 1.0);
        let zeros = Array2::from_elem((8, 8), 0.0);
        let bce = losses::bce_loss(&half, &ones).map_err(err)?;
        if (bce - std::f64::consts::LN_2).abs() > 1e-9 {
            return Err(format!("bce half-vs-ones: {bce} vs ln 2"));
        }
        // Perfect overlap: 1 - (2*64+1)/(64+64+1) = 0.
        let dice_perfect = losses::soft_dice_loss(&ones, &ones).map_err(err)?;
        if dice_perfect.abs() > 1e-9 {
            return Err(format!("dice perfect overlap: {dice_perfect} vs 0"));
        }
        // Disjoint: 1 - 1/65 = 64/65.
        let dice_disjoint = losses::soft_dice_loss(&ones, &zeros).map_err(err)?;
        if (dice_disjoint - 64.0 / 65.0).abs() > 1e-9 {
            return Err(format!("dice disjoint: {dice_disjoint} vs 64/65"));
        }
        let comp = losses::composite_mask_loss(&half, &ones, 0.5).map_err(err)?;
        let dice_half = losses::soft_dice_loss(&half, &ones).map_err(err)?;
        let expect = 0.5 * std::f64::consts::LN_2 + 0.5 * dice_half;
        if (comp - expect).abs() > 1e-9 {
            return Err(format!("composite: {comp} vs {expect}"));
        }

        // Analytic gradients vs central finite differences on random 8x8.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let pred = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.gen_range(0.05..0.95));
        let target = Array4::from_shape_fn((1, 1, 8, 8), |_| f64::from(rng.gen_bool(0.4)));
        type LossFn = fn(&mut Tape, usize, Array4<f64>) -> dsa_ltd_core::Result<usize>;
        let loss_fns: [(&str, LossFn); 3] = [
            ("l1", |t, p, tgt| t.l1_loss(p, tgt)),
            ("bce", |t, p, tgt| t.bce_loss(p, tgt)),
            ("dice", |t, p, tgt| t.soft_dice_loss(p, tgt)),
        ];
        for (name, f) in loss_fns {
            let eval = |p: &Array4<f64>| -> f64 {
                let mut tape = Tape::new(ExecMode::Sequential);
                let pi = tape.leaf(p.clone());
                let node = f(&mut tape, pi, target.clone()).unwrap();
                tape.scalar(node)
            };
            let mut tape = Tape::new(ExecMode::Sequential);
            let pi = tape.leaf(pred.clone());
            let node = f(&mut tape, pi, target.clone()).map_err(err)?;
            let grads = tape.backward(node);
            let analytic = grads.get(pi).expect("pred gradient");
            let h = 1e-6;
            for probe in [0usize, 21, 63] {
                let mut plus = pred.clone();
                plus.as_slice_mut().unwrap()[probe] += h;
                let mut minus = pred.clone();
                minus.as_slice_mut().unwrap()[probe] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[probe];
                let denom = fd.abs().max(an.abs()).max(1e-9);
                if ((fd - an) / denom).abs() > 1e-4 {
                    return Err(format!("{name} grad at {probe}: fd {fd} vs analytic {an}"));
                }
            }
        }
        Ok(())
    };
    report(2, "loss-correctness", run(), started, Duration::from_secs(60));
}

#[test]
fn criterion_3_total_loss_constants() {
    let started = Instant::now();
    let run = || -> Result<(), String> {
        let weights = LossWeights::default();
        if (weights.a, weights.lambda0, weights.lambda1) != (0.5, 0.1, 1.0) {
            return Err(format!("default weights {weights:?}"));
        }
        let report = losses::total_loss(1.0, 2.0, 3.0, &weights).map_err(|e| e.to_string())?;
        if report.total != 5.1 {
            return Err(format!("total_loss(1,2,3) = {}, want exactly 5.1", report.total));
        }
        Ok(())
    };
    report(3, "eq4-paper-constants", run(), started, Duration::from_secs(5));
}

/// Exhaustive independent key-frame scorer over the trailing window.
fn brute_force_key_frame(video: &DsaVideo) -> usize {
    let n = video.frame_count();
    let start = n - DEFAULT_WINDOW;
    let pixel_count = (video.dim().0 * video.dim().1) as f64;
    let sum_diff = |i: usize, j: usize| -> f64 {
        video
            .frame(i)
            .pixels()
            .iter()
            .zip(video.frame(j).pixels().iter())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / pixel_count
    };
    let pick = |min_index: usize| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for k in (start + 1).max(min_index)..start + DEFAULT_WINDOW - 1 {
            let score = (sum_diff(k - 1, k) + sum_diff(k, k + 1)) / 2.0;
            if best.is_none_or(|(_, s)| score < s) {
                best = Some((k, score));
            }
        }
        best.map(|(k, _)| k)
    };
    let k = pick(0).expect("window has interior candidates");
    if k < FD_OFFSET {
        pick(FD_OFFSET).expect("late candidate exists")
    } else {
        k
    }
}

#[test]
fn criterion_4_keyframe_oracle() {
    let started = Instant::now();
    let run = || -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for case in 0..100 {
            let frames: Vec<Frame> = (0..20)
                .map(|_| {
                    Frame::new(Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0..1.0)))
                        .unwrap()
                })
                .collect();
            let video = DsaVideo::new(frames).unwrap();
            let ours = select_key_frame(&video).map_err(|e| e.to_string())?.index;
            let oracle = brute_force_key_frame(&video);
            if ours != oracle {
                return Err(format!("case {case}: {ours} vs oracle {oracle}"));
            }
        }
        Ok(())
    };
    report(4, "keyframe-oracle", run(), started, Duration::from_secs(30));
}

#[test]
fn criterion_5_offset_contract() {
    let started = Instant::now();
    let run = || -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let frames: Vec<Frame> = (0..20)
            .map(|_| {
                Frame::new(Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0..1.0))).unwrap()
            })
            .collect();
        let k = 14;
        let base = frame_difference(&DsaVideo::new(frames.clone()).unwrap(), k, FD_OFFSET)
            .map_err(|e| e.to_string())?;
        for j in 0..20 {
            let mut perturbed = frames.clone();
            let bumped = perturbed[j].pixels().mapv(|v| (v * 0.5 + 0.25).clamp(0.0, 1.0));
            perturbed[j] = Frame::new(bumped).unwrap();
            let map = frame_difference(&DsaVideo::new(perturbed).unwrap(), k, FD_OFFSET)
                .map_err(|e| e.to_string())?;
            let identical = map.pixels == base.pixels;
            let involved = j == k || j == k - FD_OFFSET;
            if involved && identical {
                return Err(format!("perturbing frame {j} should change the map"));
            }
            if !involved && !identical {
                return Err(format!("perturbing frame {j} must not change the map"));
            }
        }
        Ok(())
    };
    report(5, "offset-contract", run(), started, Duration::from_secs(30));
}

#[test]
fn criterion_6_shape_channel_contracts() {
    let started = Instant::now();
    let run = || -> Result<(), String> {
        for &h in &[64usize, 128, 256] {
            for &w in &[64usize, 128, 256] {
                let mut bundle =
                    ModelBundle::build_default(4, 2, 5).map_err(|e| e.to_string())?;
                // TDL accepts exactly 10 channels.
                let stack = Array4::from_elem((1, TDL_STACK, h, w), 0.4);
                let ltd = dsa_ltd_core::models::tdl_forward(&mut bundle, &stack)
                    .map_err(|e| e.to_string())?;
                let bad_stack = Array4::from_elem((1, TDL_STACK - 1, h, w), 0.4);
                if dsa_ltd_core::models::tdl_forward(&mut bundle, &bad_stack).is_ok() {
                    return Err("TDL accepted 9 channels".into());
                }
                let frame =
                    Frame::new(Array2::from_shape_fn((h, w), |(y, x)| {
                        ((y + x) % 7) as f64 / 10.0
                    }))
                    .map_err(|e| e.to_string())?;
                let lrs = dsa_ltd_core::models::lrs_forward(&mut bundle, &frame)
                    .map_err(|e| e.to_string())?;
                // FFS takes exactly the 3-map fusion.
                let seg = dsa_ltd_core::models::ffs_forward(&mut bundle, &frame, &ltd, &lrs)
                    .map_err(|e| e.to_string())?;
                for (name, map) in [("tdl", &ltd), ("lrs", &lrs), ("ffs", &seg)] {
                    if map.dim() != (h, w) {
                        return Err(format!("{name} output {:?} at {h}x{w}", map.dim()));
                    }
                    if map.pixels().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                        return Err(format!("{name} output out of [0,1] at {h}x{w}"));
                    }
                }
            }
        }
        // The full bundle rejects an FFS config without exactly 3 inputs.
        let bad = ModelBundle::build(
            dsa_ltd_core::models::BackboneConfig::new(TDL_STACK, 1, 4, 2),
            dsa_ltd_core::models::BackboneConfig::new(1, 1, 4, 2),
            dsa_ltd_core::models::BackboneConfig::new(2, 1, 4, 2),
            0,
        );
        if bad.is_ok() {
            return Err("FFS accepted 2 input channels".into());
        }
        Ok(())
    };
    report(6, "shape-channel-contracts", run(), started, Duration::from_secs(120));
}

fn acceptance_phantom(num_samples: usize, train_fraction: f64) -> PhantomConfig {
    PhantomConfig {
        seed: 0,
        num_samples,
        height: 48,
        width: 48,
        frame_count: 20,
        washin_midpoint_range: (10, 14),
        // The library default radius range (2, 27) is expressed at 256x256 and
        // scales with resolution, which preserves the tumors' *fractional* size
        // but shrinks their *absolute* pixel count; at 48x48 most tumors clamp
        // to the 1.5 px minimum radius and the per-sample DICE ceiling drops to
        // ~0.78 from boundary quantization alone. The acceptance dataset widens
        // the range so rendered radii span ~3-12 px, preserving the absolute
        // tumor scale (and hence the attainable-DICE regime) of the 256x256
        // default at this reduced resolution.
        tumor_radius_range: (16.0, 64.0),
        train_fraction,
        ..PhantomConfig::default()
    }
}

#[test]
fn criterion_7_overfit_sanity() {
    let _guard = TRAINING_LOCK.lock().unwrap();
    let started = Instant::now();
    let run = || -> Result<(), String> {
        let data = tempfile::tempdir().unwrap();
        // 5 samples at 0.8 -> exactly 4 train samples.
        let cfg = acceptance_phantom(5, 0.8);
        let manifest = generate_dataset(&cfg, data.path()).map_err(|e| e.to_string())?;
        let train_cfg = TrainConfig {
            epochs: 200,
            tdl_warmup_epochs: 5,
            base_width: 8,
            depth: 3,
            batch_size: 4,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        let out = tempfile::tempdir().unwrap();
        let outcome = train::train(
            data.path(),
            &manifest,
            &ModelPlan::full(),
            &train_cfg,
            out.path(),
        )
        .map_err(|e| e.to_string())?;
        let best = outcome
            .epochs
            .iter()
            .map(|r| r.train_dice)
            .fold(f64::NEG_INFINITY, f64::max);
        if best < 0.95 {
            return Err(format!("best train DICE {best:.4} < 0.95 within 200 epochs"));
        }
        Ok(())
    };
    report(7, "overfit-sanity", run(), started, Duration::from_secs(15 * 60));
}

#[test]
fn criterion_8_synthetic_generalization() {
    let _guard = TRAINING_LOCK.lock().unwrap();
    let started = Instant::now();
    let run = || -> Result<(), String> {
        let data = tempfile::tempdir().unwrap();
        let cfg = acceptance_phantom(80, 0.8);
        let manifest = generate_dataset(&cfg, data.path()).map_err(|e| e.to_string())?;
        let n_train = manifest
            .split_entries(dsa_ltd_core::dataset::Split::Train)
            .len();
        let n_test = manifest
            .split_entries(dsa_ltd_core::dataset::Split::Test)
            .len();
        if (n_train, n_test) != (64, 16) {
            return Err(format!("split {n_train}/{n_test}, want 64/16"));
        }
        let train_cfg = TrainConfig {
            epochs: 30,
            tdl_warmup_epochs: 3,
            base_width: 8,
            depth: 3,
            validation_fraction: 0.2,
            ..TrainConfig::default()
        };
        let out = tempfile::tempdir().unwrap();
        let variants = dsa_ltd_core::harness::canonical_variants();
        let report = dsa_ltd_core::harness::run_ablation(
            data.path(),
            &manifest,
            &variants,
            &train_cfg,
            out.path(),
        )
        .map_err(|e| e.to_string())?;

        if report.variants.len() != 8 {
            return Err(format!("{} variants, want 8", report.variants.len()));
        }
        for v in &report.variants {
            if let Some(e) = &v.error {
                return Err(format!("variant {} failed: {e}", v.name));
            }
        }
        for artifact in ["results.json", "results.csv", "dice_bar_chart.png"] {
            if !out.path().join(artifact).exists() {
                return Err(format!("missing report artifact {artifact}"));
            }
        }
        let csv = std::fs::read_to_string(out.path().join("results.csv")).unwrap();
        if csv.lines().count() != 9 {
            return Err(format!("results.csv has {} lines, want 9", csv.lines().count()));
        }
        let full = report
            .variants
            .iter()
            .find(|v| v.name == "full")
            .expect("full variant present");
        let dice = full.mean_dice.unwrap();
        println!("  full-model test DICE {dice:.4}");
        for v in &report.variants {
            println!("  variant {} mean DICE {:.4}", v.name, v.mean_dice.unwrap());
        }
        if dice < 0.70 {
            return Err(format!("full model test DICE {dice:.4} < 0.70"));
        }
        Ok(())
    };
    report(
        8,
        "synthetic-generalization",
        run(),
        started,
        Duration::from_secs(2 * 60 * 60),
    );
}

#[test]
fn criterion_9_determinism() {
    let _guard = TRAINING_LOCK.lock().unwrap();
    let started = Instant::now();
    let run = || -> Result<(), String> {
        std::env::set_var("DSA_LTD_DETERMINISTIC", "1");
        let data = tempfile::tempdir().unwrap();
        let cfg = acceptance_phantom(6, 0.5);
        let manifest = generate_dataset(&cfg, data.path()).map_err(|e| e.to_string())?;
        let train_cfg = TrainConfig {
            epochs: 2,
            tdl_warmup_epochs: 1,
            base_width: 4,
            depth: 2,
            batch_size: 4,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        let variants = vec![
            dsa_ltd_core::harness::canonical_variants().remove(0),
            dsa_ltd_core::harness::canonical_variants().remove(7),
        ];
        let run_once = || -> Result<(Vec<u8>, Vec<u8>), String> {
            let out = tempfile::tempdir().unwrap();
            dsa_ltd_core::harness::run_ablation(
                data.path(),
                &manifest,
                &variants,
                &train_cfg,
                out.path(),
            )
            .map_err(|e| e.to_string())?;
            let json = std::fs::read(out.path().join("results.json")).unwrap();
            let log = std::fs::read(out.path().join("full/training_log.csv")).unwrap();
            Ok((json, log))
        };
        let (json1, log1) = run_once()?;
        let (json2, log2) = run_once()?;
        std::env::remove_var("DSA_LTD_DETERMINISTIC");
        if log1 != log2 {
            return Err("training logs differ between identical runs".into());
        }
        if json1 != json2 {
            return Err("results.json differs between identical runs".into());
        }
        Ok(())
    };
    report(9, "determinism", run(), started, Duration::from_secs(10 * 60));
}

#[test]
fn acceptance_artifacts_note() {
    // The heavy criteria print their measured numbers above; this test only
    // anchors the suite name in `cargo test` output.
    let _ = Path::new("acceptance");
}
