//! Integration tests of the command-line binary: exit-code contract,
//! artifact layout, determinism of regenerated outputs, and the
//! self-consistency of written metrics.
//!
//! These run a deliberately tiny encoder so each invocation finishes in
//! well under a second.

use std::path::{Path, PathBuf};
use std::process::Output;

use ssdca::stats::{compute_metrics, parse_predictions_csv};

const MICRO_CONFIG: &str = r#"{
  "model": {"encoder": {"image_size": 32, "patch_size": 4, "window_size": 1,
                         "embed_dim": 8, "depths": [1,1,1,1], "num_heads": [1,1,1,1]}},
  "train": {"total_epochs": 3, "warmup_epochs": 1, "batch_size": 4,
             "fold_count": 2, "steps_per_epoch": 4, "seed": 5}
}"#;

const MICRO_SPEC: &str =
    r#"{"patients": 6, "timepoints": 3, "class_ratio": 0.5, "image_px": 32}"#;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ssdca")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    std::process::Command::new(bin())
        .current_dir(dir)
        .args(args)
        .env_remove("SSDCA_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: expected exit {code}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref())
        .unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// Writes the shared micro fixtures and synthesizes the dataset once.
fn setup(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("micro.json"), MICRO_CONFIG).unwrap();
    std::fs::write(dir.join("spec.json"), MICRO_SPEC).unwrap();
    let out = run(dir, &["synth", "--spec", "spec.json", "--out", "data", "--seed", "5"]);
    assert_exit(&out, 0, "synth");
    dir.join("data")
}

#[test]
fn synth_refuses_overwrite_reproduces_and_rejects_bad_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    assert!(dir.join("data/manifest.jsonl").exists());
    assert!(dir.join("data/masks.json").exists());
    assert!(dir.join("data/config.json").exists(), "resolved config in output dir");
    assert!(dir.join("data/config.hash").exists());

    // Refuses a non-empty output directory without --force.
    let out = run(dir, &["synth", "--spec", "spec.json", "--out", "data", "--seed", "5"]);
    assert_exit(&out, 2, "overwrite refusal");
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));

    // --force regenerates; a second directory with the same seed is
    // byte-identical.
    let out =
        run(dir, &["synth", "--spec", "spec.json", "--out", "data", "--seed", "5", "--force"]);
    assert_exit(&out, 0, "forced synth");
    let out = run(dir, &["synth", "--spec", "spec.json", "--out", "data2", "--seed", "5"]);
    assert_exit(&out, 0, "second synth");
    assert_eq!(
        read(dir.join("data/manifest.jsonl")),
        read(dir.join("data2/manifest.jsonl")),
        "same seed, same manifest bytes"
    );
    assert_eq!(read(dir.join("data/masks.json")), read(dir.join("data2/masks.json")));
    let img = "images/p000_t0_i0.png";
    assert_eq!(
        std::fs::read(dir.join("data").join(img)).unwrap(),
        std::fs::read(dir.join("data2").join(img)).unwrap(),
        "same seed, same image bytes"
    );

    // A wrong field name and a wrong field type both name the field and
    // exit 2.
    std::fs::write(dir.join("bad1.json"), r#"{"patiens": 6}"#).unwrap();
    let out = run(dir, &["synth", "--spec", "bad1.json", "--out", "d3"]);
    assert_exit(&out, 2, "unknown spec field");
    assert!(String::from_utf8_lossy(&out.stderr).contains("patiens"));
    std::fs::write(dir.join("bad2.json"), r#"{"timepoints": "three"}"#).unwrap();
    let out = run(dir, &["synth", "--spec", "bad2.json", "--out", "d4"]);
    assert_exit(&out, 2, "bad spec value");
    assert!(String::from_utf8_lossy(&out.stderr).contains("timepoints"));
}

#[test]
fn train_eval_roundtrip_with_self_consistent_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);

    let out = run(dir, &["train", "--config", "micro.json", "--data", "data", "--out", "run"]);
    assert_exit(&out, 0, "train");
    for fold in 0..2 {
        for name in ["best.ckpt", "best.meta.json", "curves.csv", "test_predictions.csv"] {
            assert!(dir.join(format!("run/fold{fold}/{name}")).exists(), "missing {name}");
        }
    }
    assert!(dir.join("run/cv_report.json").exists());
    assert!(dir.join("run/split_plan.json").exists());

    let out = run(
        dir,
        &[
            "eval",
            "--config",
            "micro.json",
            "--data",
            "data",
            "--out",
            "eval",
            "--checkpoint",
            "run/fold0/best.ckpt",
        ],
    );
    assert_exit(&out, 0, "eval");

    // The written metrics must equal metrics recomputed from the written
    // predictions CSV: the CSV is the full-precision record of the run.
    let records = parse_predictions_csv(&read(dir.join("eval/predictions.csv"))).unwrap();
    let recomputed = compute_metrics(&records, 0.5);
    let written: serde_json::Value =
        serde_json::from_str(&read(dir.join("eval/metrics.json"))).unwrap();
    assert_eq!(written["tp"].as_u64().unwrap(), recomputed.tp);
    assert_eq!(written["tn"].as_u64().unwrap(), recomputed.tn);
    assert_eq!(written["fp"].as_u64().unwrap(), recomputed.fp);
    assert_eq!(written["fn_"].as_u64().unwrap(), recomputed.fn_);
    assert_eq!(
        written["balanced_accuracy"].as_f64(),
        recomputed.balanced_accuracy,
        "balanced accuracy reproduced exactly from the CSV"
    );

    // Comparing a prediction set against itself is the degenerate t-test.
    let out = run(
        dir,
        &[
            "eval",
            "--config",
            "micro.json",
            "--data",
            "data",
            "--out",
            "eval_self",
            "--checkpoint",
            "run/fold0/best.ckpt",
            "--compare",
            "eval/predictions.csv",
        ],
    );
    assert_exit(&out, 0, "eval --compare");
    let cmp: serde_json::Value =
        serde_json::from_str(&read(dir.join("eval_self/comparison.json"))).unwrap();
    assert_eq!(cmp["test"]["degenerate"], serde_json::Value::Bool(true));
    assert_eq!(cmp["test"]["mean_diff"].as_f64(), Some(0.0));

    // --topk 1 keeps singleton groups' probabilities verbatim.
    let out = run(
        dir,
        &[
            "eval",
            "--config",
            "micro.json",
            "--data",
            "data",
            "--out",
            "eval_k1",
            "--checkpoint",
            "run/fold0/best.ckpt",
            "--topk",
            "1",
        ],
    );
    assert_exit(&out, 0, "eval --topk 1");
    let raw = parse_predictions_csv(&read(dir.join("eval_k1/raw_pairs.csv"))).unwrap();
    let agg = parse_predictions_csv(&read(dir.join("eval_k1/predictions.csv"))).unwrap();
    // The micro dataset has one image per visit, so every group is a
    // singleton and k=1 aggregation is the identity.
    assert_eq!(raw.len(), agg.len());
    for (r, a) in raw.iter().zip(&agg) {
        assert_eq!(r.same_day_group, a.same_day_group);
        assert_eq!(r.probability, a.probability, "k=1 is the identity on singletons");
    }
}

#[test]
fn eval_rejects_checkpoints_from_other_configs_with_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let out = run(dir, &["train", "--config", "micro.json", "--data", "data", "--out", "run"]);
    assert_exit(&out, 0, "train");

    // A different seed changes the training fingerprint the checkpoint
    // metadata records.
    let out = run(
        dir,
        &[
            "eval",
            "--config",
            "micro.json",
            "--data",
            "data",
            "--out",
            "eval_bad",
            "--checkpoint",
            "run/fold0/best.ckpt",
            "--seed",
            "99",
        ],
    );
    assert_exit(&out, 4, "config mismatch");
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("trained under config"), "describes the mismatch: {err}");
}

#[test]
fn train_divergence_aborts_with_exit_3_naming_the_fold() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let diverging = MICRO_CONFIG.replace("\"seed\": 5", "\"seed\": 5, \"learning_rate\": 1e12");
    std::fs::write(dir.join("diverge.json"), diverging).unwrap();
    let out = run(dir, &["train", "--config", "diverge.json", "--data", "data", "--out", "rund"]);
    assert_exit(&out, 3, "divergence");
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("fold 0"), "names the failing fold: {err}");
}

#[test]
fn reruns_resume_and_env_data_root_reproduce_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);

    // Same config + seed twice: metric CSV artifacts are byte-identical.
    let out = run(dir, &["train", "--config", "micro.json", "--data", "data", "--out", "a"]);
    assert_exit(&out, 0, "run a");
    let out = run(dir, &["train", "--config", "micro.json", "--data", "data", "--out", "b"]);
    assert_exit(&out, 0, "run b");
    for rel in
        ["fold0/curves.csv", "fold1/curves.csv", "fold0/test_predictions.csv", "cv_report.json"]
    {
        assert_eq!(read(dir.join("a").join(rel)), read(dir.join("b").join(rel)), "{rel} differs");
    }

    // Pause after two epochs, then resume: the finished artifacts match the
    // uninterrupted run byte for byte.
    let out = run(
        dir,
        &[
            "train",
            "--config",
            "micro.json",
            "--data",
            "data",
            "--out",
            "c",
            "--stop-after-epoch",
            "2",
        ],
    );
    assert_exit(&out, 0, "paused run");
    let report = read(dir.join("c/cv_report.json"));
    assert!(report.contains("\"paused\""), "folds paused: {report}");
    let out =
        run(dir, &["train", "--config", "micro.json", "--data", "data", "--out", "c", "--resume"]);
    assert_exit(&out, 0, "resumed run");
    for rel in ["fold0/curves.csv", "fold1/curves.csv", "fold0/test_predictions.csv"] {
        assert_eq!(
            read(dir.join("a").join(rel)),
            read(dir.join("c").join(rel)),
            "resumed {rel} differs from uninterrupted run"
        );
    }
    assert_eq!(
        std::fs::read(dir.join("a/fold0/best.ckpt")).unwrap(),
        std::fs::read(dir.join("c/fold0/best.ckpt")).unwrap(),
        "resumed checkpoint bytes differ"
    );

    // The data root can come from the environment instead of --data.
    let out = std::process::Command::new(bin())
        .current_dir(dir)
        .args(["train", "--config", "micro.json", "--out", "d"])
        .env("SSDCA_DATA_ROOT", dir.join("data"))
        .output()
        .expect("binary runs");
    assert_exit(&out, 0, "env data root");
    assert_eq!(read(dir.join("a/fold0/curves.csv")), read(dir.join("d/fold0/curves.csv")));

    // Without either source the command refuses with exit 2 naming both.
    let out = run(dir, &["train", "--config", "micro.json", "--out", "e"]);
    assert_exit(&out, 2, "missing data root");
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("--data") && err.contains("SSDCA_DATA_ROOT"), "{err}");
}

#[test]
fn ablate_stage_writes_four_rows_with_token_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let out =
        run(dir, &["ablate-stage", "--config", "micro.json", "--data", "data", "--out", "abl"]);
    assert_exit(&out, 0, "ablate-stage");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    // Token counts follow the 4x-per-stage hierarchy of the 32-px encoder.
    for line in ["stage 1: 64 tokens", "stage 2: 16 tokens", "stage 3: 4 tokens", "stage 4: 1 tokens"]
    {
        assert!(stdout.contains(line), "missing `{line}` in:\n{stdout}");
    }
    let table = read(dir.join("abl/ablation.csv"));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "header + one row per stage:\n{table}");
    assert!(lines[0].starts_with("stage,tokens,balanced_accuracy_mean"));
    for (i, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{},", i + 1)), "row {i} is stage {}", i + 1);
        assert!(dir.join(format!("abl/stage{}/cv_report.json", i + 1)).exists());
        assert!(dir.join(format!("abl/stage{}/config.json", i + 1)).exists());
    }

    // The ablation loops the cross-attention variant; baselines are refused.
    let single = MICRO_CONFIG.replace("\"model\": {", "\"model\": {\"variant\": \"single\", ");
    std::fs::write(dir.join("single.json"), single).unwrap();
    let out =
        run(dir, &["ablate-stage", "--config", "single.json", "--data", "data", "--out", "abl2"]);
    assert_exit(&out, 2, "ablate-stage on single variant");
}

#[test]
fn explain_exports_bundles_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let out = run(dir, &["train", "--config", "micro.json", "--data", "data", "--out", "run"]);
    assert_exit(&out, 0, "train");

    let explain = |out_dir: &str| {
        run(
            dir,
            &[
                "explain",
                "--config",
                "micro.json",
                "--data",
                "data",
                "--out",
                out_dir,
                "--checkpoint",
                "run/fold0/best.ckpt",
                "--pairs",
                "2",
            ],
        )
    };
    let out = explain("ex1");
    assert_exit(&out, 0, "explain");
    for name in [
        "embeddings.csv",
        "projection.csv",
        "cluster_metrics.json",
        "metrics.json",
        "robustness_metrics.csv",
        "robustness_histogram.csv",
    ] {
        assert!(dir.join("ex1").join(name).exists(), "missing {name}");
    }
    for pair in ["pair0", "pair1"] {
        let p = dir.join("ex1").join(pair);
        assert!(p.join("gradcam_grid.csv").exists());
        assert!(p.join("gradcam_upsampled.csv").exists());
        // Both attention directions are exported for the DCA variant.
        assert!(p.join("attention_pre_to_post.csv").exists());
        assert!(p.join("attention_post_to_pre.csv").exists());
        assert!(p.join("pair_info.json").exists());
    }
    // The two selected pairs cover both outcomes.
    let label_of = |pair: &str| {
        let info: serde_json::Value =
            serde_json::from_str(&read(dir.join("ex1").join(pair).join("pair_info.json"))).unwrap();
        info["label"].as_f64().unwrap()
    };
    let mut labels = [label_of("pair0"), label_of("pair1")];
    labels.sort_by(f64::total_cmp);
    assert_eq!(labels, [0.0, 1.0]);

    // Repeated invocation (fresh process) reproduces identical analysis
    // artifacts: the projection and cluster metrics are deterministic.
    let out = explain("ex2");
    assert_exit(&out, 0, "second explain");
    for name in ["cluster_metrics.json", "projection.csv", "embeddings.csv"] {
        assert_eq!(
            read(dir.join("ex1").join(name)),
            read(dir.join("ex2").join(name)),
            "{name} differs between runs"
        );
    }

    // The single-image baseline exports GradCAM but no attention maps.
    let out = run(
        dir,
        &[
            "train", "--config", "micro.json", "--data", "data", "--out", "run_s", "--variant",
            "single",
        ],
    );
    assert_exit(&out, 0, "train single");
    let out = run(
        dir,
        &[
            "explain",
            "--config",
            "micro.json",
            "--data",
            "data",
            "--out",
            "ex_s",
            "--checkpoint",
            "run_s/fold0/best.ckpt",
            "--pairs",
            "1",
        ],
    );
    assert_exit(&out, 0, "explain single");
    assert!(dir.join("ex_s/pair0/gradcam_grid.csv").exists());
    assert!(!dir.join("ex_s/pair0/attention_pre_to_post.csv").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("dual cross-attention"));
}
