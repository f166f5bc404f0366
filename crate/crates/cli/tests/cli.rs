use std::path::Path;
use std::process::{Command, Output};

fn dsa_ltd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsa-ltd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn gen_tiny(out: &Path) -> Output {
    dsa_ltd(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "7",
        "--override",
        "num_samples=2",
        "--override",
        "height=32",
        "--override",
        "width=32",
        "--override",
        "frame_count=20",
        "--override",
        "washin_midpoint_range=[10,14]",
    ])
}

#[test]
fn gen_data_writes_dataset_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let first = gen_tiny(&out);
    assert!(first.status.success(), "{:?}", first);
    assert!(out.join("manifest.json").exists());

    // Without --force the second run must refuse before writing anything.
    let second = gen_tiny(&out);
    assert_eq!(second.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&second.stderr);
    assert!(stderr.starts_with("error: config:"), "{stderr}");
    assert_eq!(stderr.lines().count(), 1);
}

#[test]
fn unknown_config_key_is_rejected_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let output = dsa_ltd(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--override",
        "not_a_real_knob=1",
    ]);
    assert_eq!(output.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn unknown_flag_is_rejected_with_exit_2() {
    let output = dsa_ltd(&["gen-data", "--no-such-flag"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn select_keyframe_prints_index_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    assert!(gen_tiny(&out).status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let sample = &manifest["samples"][0];
    let video_dir = out.join(sample["id"].as_str().unwrap());

    let output = dsa_ltd(&["select-keyframe", "--video", video_dir.to_str().unwrap()]);
    assert!(output.status.success(), "{:?}", output);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.starts_with("key_frame_index "), "{stdout}");
    assert!(stdout.lines().skip(1).all(|l| l.starts_with("candidate ")));
    assert!(stdout.lines().count() > 1);
}

#[test]
fn extract_motion_writes_png() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    assert!(gen_tiny(&out).status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let sample = &manifest["samples"][0];
    let video_dir = out.join(sample["id"].as_str().unwrap());
    let key = sample["key_frame_index"].as_u64().unwrap();

    let map_path = dir.path().join("fd.png");
    let output = dsa_ltd(&[
        "extract-motion",
        "--video",
        video_dir.to_str().unwrap(),
        "--frame",
        &key.to_string(),
        "--kind",
        "frame-difference",
        "--out",
        map_path.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{:?}", output);
    assert!(map_path.exists());
}

#[test]
fn train_and_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds");
    let gen = dsa_ltd(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
        "--override",
        "num_samples=4",
        "--override",
        "height=32",
        "--override",
        "width=32",
        "--override",
        "frame_count=20",
        "--override",
        "washin_midpoint_range=[10,14]",
        "--override",
        "train_fraction=0.5",
    ]);
    assert!(gen.status.success(), "{:?}", gen);

    let run = dir.path().join("run");
    let train = dsa_ltd(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--override",
        "epochs=1",
        "--override",
        "tdl_warmup_epochs=0",
        "--override",
        "base_width=4",
        "--override",
        "depth=2",
        "--override",
        "validation_fraction=0.0",
    ]);
    assert!(train.status.success(), "{:?}", train);
    assert!(run.join("training_log.csv").exists());
    assert!(run.join("final.ckpt").exists());

    let eval = dsa_ltd(&[
        "evaluate",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        run.join("final.ckpt").to_str().unwrap(),
    ]);
    assert!(eval.status.success(), "{:?}", eval);
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("mean_dice "), "{stdout}");
}
