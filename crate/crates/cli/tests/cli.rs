//! Behavior of the installed binary: exit codes, config resolution on disk,
//! and a miniature end-to-end pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn crackdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crackdet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn no_subcommand_is_usage_error() {
    let out = crackdet(&[]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = crackdet(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = crackdet(&["synth", "--turbo"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_config_error_with_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "lr_gg = 1e-4\n").unwrap();
    let out = crackdet(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let msg = stderr(&out);
    assert!(msg.contains("lr_gg") && msg.contains("lr_g"), "{msg}");
}

#[test]
fn missing_config_file_is_config_error() {
    let out = crackdet(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn train_on_missing_dataset_is_pipeline_error_naming_the_module() {
    let dir = tempfile::tempdir().unwrap();
    let out = crackdet(&[
        "train",
        "--data-root",
        dir.path().join("nowhere").to_str().unwrap(),
        "--run-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("datapipe"), "{}", stderr(&out));
}

#[test]
fn synth_writes_dataset_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = crackdet(&[
        "synth",
        "--data-root",
        data.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--n-train",
        "3",
        "--n-test",
        "2",
        "--resolution",
        "32",
        "--seed",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(data.join("train/undamaged/train_0000.png").is_file());
    assert!(data.join("test/images/test_0001.png").is_file());
    assert!(data.join("test/masks/test_0001.png").is_file());

    let resolved = std::fs::read_to_string(run.join("config.resolved")).unwrap();
    assert!(resolved.contains("n_train = 3  # flag"), "{resolved}");
    assert!(resolved.contains("seed = 5  # flag"), "{resolved}");
    assert!(resolved.contains("epochs = 200  # default"), "{resolved}");
}

#[test]
fn flag_overrides_file_in_resolved_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "resolution = 16\nseed = 11 # comment\nmask_scales = 8,4\n").unwrap();
    let run = dir.path().join("run");
    let out = crackdet(&[
        "masks",
        "--config",
        cfg.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--seed",
        "12",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let resolved = std::fs::read_to_string(run.join("config.resolved")).unwrap();
    assert!(resolved.contains("resolution = 16  # file"), "{resolved}");
    assert!(resolved.contains("seed = 12  # flag"), "{resolved}");
    assert!(resolved.contains("mask_scales = 8,4  # file"), "{resolved}");
    // Two scales, one complement pair each.
    let masks: Vec<_> = std::fs::read_dir(run.join("masks")).unwrap().collect();
    assert_eq!(masks.len(), 4);
}

#[test]
fn eval_with_missing_predictions_is_pairing_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let synth = crackdet(&[
        "synth",
        "--data-root",
        data.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--n-train",
        "1",
        "--n-test",
        "2",
        "--resolution",
        "16",
    ]);
    assert_eq!(synth.status.code(), Some(0), "{}", stderr(&synth));

    // A prediction directory with one matching mask and one missing.
    let preds = run.join("detections");
    std::fs::create_dir_all(&preds).unwrap();
    std::fs::copy(
        data.join("test/masks/test_0000.png"),
        preds.join("test_0000_mask.png"),
    )
    .unwrap();
    let out = crackdet(&[
        "eval",
        "--data-root",
        data.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--resolution",
        "16",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let msg = stderr(&out);
    assert!(msg.contains("pairing") && msg.contains("test_0001"), "{msg}");
}

#[test]
fn eval_against_perfect_predictions_scores_ones() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let synth = crackdet(&[
        "synth",
        "--data-root",
        data.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--n-train",
        "1",
        "--n-test",
        "2",
        "--resolution",
        "16",
    ]);
    assert_eq!(synth.status.code(), Some(0), "{}", stderr(&synth));

    let preds = run.join("detections");
    std::fs::create_dir_all(&preds).unwrap();
    for stem in ["test_0000", "test_0001"] {
        std::fs::copy(
            data.join("test/masks").join(format!("{stem}.png")),
            preds.join(format!("{stem}_mask.png")),
        )
        .unwrap();
    }
    let out = crackdet(&[
        "eval",
        "--data-root",
        data.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--resolution",
        "16",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "dataset,n_images,precision,recall,accuracy,f1,iou"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "data");
    assert_eq!(row[1], "2");
    for cell in &row[2..] {
        assert_eq!(cell.parse::<f64>().unwrap(), 100.0, "{csv}");
    }
}

/// Miniature pipeline: train a tiny model for one epoch, detect, eval.
#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let common = [
        "--data-root",
        data.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--resolution",
        "32",
    ];

    let synth = crackdet(&[&["synth"], &common[..], &["--n-train", "4", "--n-test", "1"]].concat());
    assert_eq!(synth.status.code(), Some(0), "{}", stderr(&synth));

    let train = crackdet(
        &[
            &["train"],
            &common[..],
            &[
                "--epochs", "1", "--patience", "0", "--batch-size", "2", "--base-width", "4",
                "--mask-scales", "16,8", "--no-style",
            ],
        ]
        .concat(),
    );
    assert_eq!(train.status.code(), Some(0), "{}", stderr(&train));
    assert!(run.join("best.ckpt").is_file());
    assert!(run.join("history.csv").is_file());

    let detect = crackdet(
        &[
            &["detect"],
            &common[..],
            &["--mask-scales", "16,8", "--write-error-maps", "--write-overlays"],
        ]
        .concat(),
    );
    assert_eq!(detect.status.code(), Some(0), "{}", stderr(&detect));
    let preds = run.join("detections");
    assert!(preds.join("test_0000_mask.png").is_file());
    assert!(preds.join("test_0000_error.png").is_file());
    assert!(preds.join("test_0000_overlay.png").is_file());

    let eval = crackdet(&[&["eval"], &common[..]].concat());
    assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
    assert!(stdout(&eval).contains("eval: 1 images"), "{}", stdout(&eval));
    assert!(run.join("metrics.csv").is_file());

    // The resolved snapshot reproduces the detect invocation when fed back.
    let reload = crackdet(&[
        "detect",
        "--config",
        run.join("config.resolved").to_str().unwrap(),
    ]);
    assert_eq!(reload.status.code(), Some(0), "{}", stderr(&reload));
}

#[test]
fn detect_without_checkpoint_is_pipeline_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let synth = crackdet(&[
        "synth",
        "--data-root",
        data.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--n-train",
        "1",
        "--n-test",
        "1",
        "--resolution",
        "16",
    ]);
    assert_eq!(synth.status.code(), Some(0), "{}", stderr(&synth));
    let out = crackdet(&[
        "detect",
        "--data-root",
        data.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--resolution",
        "16",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn help_mentions_all_subcommands() {
    let out = crackdet(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for sub in ["synth", "masks", "train", "detect", "eval", "ablate"] {
        assert!(text.contains(sub), "missing {sub} in help: {text}");
    }
}

/// `freeze_d` with a live adversarial weight must be rejected before any
/// training work happens.
#[test]
fn freeze_d_with_adversarial_weight_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = crackdet(&[
        "train",
        "--data-root",
        dir.path().join("data").to_str().unwrap(),
        "--run-dir",
        dir.path().join("run").to_str().unwrap(),
        "--freeze-d",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("lambda_adv"), "{}", stderr(&out));
}

fn file_names(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn masks_subcommand_names_files_by_mode_and_scale() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = crackdet(&[
        "masks",
        "--run-dir",
        run.to_str().unwrap(),
        "--resolution",
        "16",
        "--mask-scales",
        "8",
        "--mask-mode",
        "striped",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let names = file_names(&run.join("masks"));
    assert_eq!(names, ["mask_striped_8_0.png", "mask_striped_8_1.png"]);
}
