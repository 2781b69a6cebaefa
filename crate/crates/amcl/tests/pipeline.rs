//! End-to-end pipeline and CLI tests: stage chaining, exit codes, manifest
//! bookkeeping and byte-level reproducibility of data artifacts.

use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_amcl");

/// Overrides that shrink every stage to a few seconds.
fn tiny_overrides() -> Vec<String> {
    [
        "dataset.num_classes=3",
        "dataset.images_per_class_per_session=2",
        "masking.corpus_size=256",
        "gan.epochs=1",
        "gan.batch_size=32",
        "gan.corpus_subsample=64",
        "contrastive.encoder=cnn-tiny",
        "contrastive.batch_size=4",
        "contrastive.epochs=2",
        "evalkit.finetune_epochs=2",
        "evalkit.compare_modes=scratch,amcl",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run_cli(out: &Path, extra: &[&str], cmd: &str) -> std::process::Output {
    let mut args: Vec<String> = vec!["--output".into(), out.display().to_string()];
    for o in tiny_overrides() {
        args.push("--set".into());
        args.push(o);
    }
    for e in extra {
        args.push("--set".into());
        args.push(e.to_string());
    }
    args.push(cmd.into());
    Command::new(BIN)
        .args(&args)
        .env_remove("AMCL_OUTPUT_DIR")
        .output()
        .expect("spawn amcl binary")
}

fn exit_code(out: &std::process::Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_cli(dir.path(), &[], "all");
    assert_eq!(
        exit_code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    for artifact in [
        "dataset/synthetic_config.txt",
        "masks.txt",
        "gan_generator.ckpt",
        "gan_discriminator.ckpt",
        "gan_loss.csv",
        "encoder.ckpt",
        "amcl_state.ckpt",
        "pretrain_history.csv",
        "classifier.ckpt",
        "finetune_loss.csv",
        "report.json",
        "roc.csv",
        "compare.csv",
        "manifest.jsonl",
        "gan_loss.png",
        "pretrain_loss.png",
        "finetune_loss.png",
        "roc.png",
        "mask_gallery.png",
        "masked_gallery.png",
    ] {
        assert!(
            dir.path().join(artifact).exists(),
            "missing artifact {artifact}"
        );
    }

    // Manifest: valid JSON lines, every artifact exactly once.
    let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let mut artifacts = Vec::new();
    for line in manifest.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let name = rec["artifact"].as_str().unwrap().to_string();
        assert!(rec["hash"].as_str().unwrap().len() == 64, "sha256 hex hash");
        assert!(rec["wall_time_s"].as_f64().unwrap() >= 0.0);
        artifacts.push(name);
    }
    let mut dedup = artifacts.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), artifacts.len(), "artifacts referenced once");

    // The comparison table mirrors the recognition-table columns.
    let compare = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    assert!(compare.starts_with("mode,ACC,EER\n"));
    assert!(compare.contains("scratch,"));
    assert!(compare.contains("amcl,"));
}

#[test]
fn reruns_reproduce_metric_files_byte_identically() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let out = run_cli(dir.path(), &[], "all");
        assert_eq!(exit_code(&out), 0);
    }
    // Data files must match byte for byte; plots are exempt and the
    // manifest carries wall times.
    for artifact in [
        "dataset/synthetic_config.txt",
        "masks.txt",
        "gan_loss.csv",
        "gan_generator.ckpt",
        "encoder.ckpt",
        "pretrain_history.csv",
        "classifier.ckpt",
        "finetune_loss.csv",
        "report.json",
        "roc.csv",
        "compare.csv",
    ] {
        let a = fs::read(dir_a.path().join(artifact)).unwrap();
        let b = fs::read(dir_b.path().join(artifact)).unwrap();
        assert_eq!(a, b, "artifact {artifact} differs between identical runs");
    }
}

#[test]
fn invalid_config_exits_2_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_cli(dir.path(), &["contrastive.lambda=-1"], "all");
    assert_eq!(exit_code(&out), 2);
    assert!(
        !dir.path().join("dataset").exists(),
        "no stage may run on a bad config"
    );

    let out = run_cli(dir.path(), &["nope.key=1"], "synth-data");
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn missing_artifact_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    // train-gan with no mask corpus anywhere in the schedule.
    let out = run_cli(dir.path(), &[], "train-gan");
    assert_eq!(exit_code(&out), 4, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // finetune needs a pretrained encoder by default.
    let out = run_cli(dir.path(), &[], "finetune");
    assert_eq!(exit_code(&out), 4);

    // report with nothing to plot.
    let out = run_cli(dir.path(), &[], "report");
    assert_eq!(exit_code(&out), 4);
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(exit_code(&run_cli(dir.path(), &[], "synth-data")), 0);
    fs::write(dir.path().join("classifier.ckpt"), b"garbage").unwrap();
    let out = run_cli(dir.path(), &[], "eval");
    assert_eq!(exit_code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn output_dir_env_var_takes_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("from-env");
    let flag_dir = dir.path().join("from-flag");
    let mut args: Vec<String> = vec!["--output".into(), flag_dir.display().to_string()];
    for o in tiny_overrides() {
        args.push("--set".into());
        args.push(o);
    }
    args.push("gen-masks".into());
    let out = Command::new(BIN)
        .args(&args)
        .env("AMCL_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(env_dir.join("masks.txt").exists());
    assert!(!flag_dir.join("masks.txt").exists());
}

#[test]
fn stages_resume_from_existing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    // Produce prerequisites one subcommand at a time; each later stage
    // resumes from what is on disk.
    for cmd in ["synth-data", "gen-masks", "train-gan", "pretrain", "finetune", "eval"] {
        let out = run_cli(dir.path(), &[], cmd);
        assert_eq!(
            exit_code(&out),
            0,
            "stage {cmd} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() >= 0.0);
    assert!(report["roc"].as_array().unwrap().len() >= 2);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
}
