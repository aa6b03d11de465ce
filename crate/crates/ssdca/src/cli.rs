//! Command-line front end wiring every module together: dataset synthesis,
//! cross-validated training, checkpoint evaluation, fusion-stage ablation,
//! and interpretability export.
//!
//! Every artifact-producing command resolves one [`RunConfig`] up front and
//! writes the resolved copy plus its hash into the output directory, so any
//! result folder states exactly how it was produced. Exit codes are a stable
//! contract: 0 success, 2 configuration error, 3 numerical abort, 4 artifact
//! mismatch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::archive::load_checkpoint;
use crate::config::{Overrides, RunConfig, DATA_ROOT_ENV};
use crate::data::{build_pairs, synth, ImageStore, Manifest, Normalization, PairMode};
use crate::error::Error;
use crate::interpret::{
    attention_correspondence, cluster_report, embeddings_csv, extract_embeddings, gradcam,
    grid_cell_of, grid_csv, grid_mask_of_disk, mask_iou, pair_tensors, projection_csv, Projection,
};
use crate::model::{Model, Variant};
use crate::params::ParamSet;
use crate::stats::{
    paired_t_test, parse_predictions_csv, predictions_csv, robustness_histogram_csv,
    robustness_metrics_csv, robustness_report, MetricsReport, PairedTTest, PredictionRecord,
};
use crate::train::{
    config_fingerprint, cross_validate, score_pairs, CheckpointMeta, CvReport, FoldSummary,
};
use crate::Result;

/// Longitudinal image-pair classifier: Siamese Swin encoder with dual
/// cross-attention fusion, plus feature-concatenation and single-image
/// baselines.
#[derive(Parser, Debug)]
#[command(name = "ssdca", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON config file overlaying the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in settings profile: "paper" (full-size model) or "toy"
    /// (desktop-sized model, the default).
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Base seed for every derived random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. This build executes numerics sequentially; larger
    /// values are accepted and noted, not used.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Record strict determinism (sequential reductions, fixed streams) in
    /// the resolved config. This build always computes that way.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory holding manifest.jsonl and images/ (fallback: the
    /// SSDCA_DATA_ROOT environment variable).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic longitudinal dataset into --out.
    Synth {
        /// Generator spec JSON; built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train with patient-stratified cross-validation.
    Train {
        /// Model variant: ssdca | ssfc | single.
        #[arg(long)]
        variant: Option<String>,
        /// Continue paused folds from their saved state snapshots.
        #[arg(long)]
        resume: bool,
        /// Write a resumable state snapshot after every epoch.
        #[arg(long)]
        save_state: bool,
        /// Pause every fold after this many epochs (pairs with --resume).
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Score a trained checkpoint on the held-out test pairs.
    Eval {
        /// Checkpoint archive (its .meta.json must sit next to it).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override same-day top-k aggregation; 1 disables it.
        #[arg(long)]
        topk: Option<usize>,
        /// Another run's predictions.csv to compare against with a paired
        /// t-test.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Re-train the cross-attention model fusing at each encoder stage and
    /// tabulate the comparison.
    AblateStage,
    /// Export embeddings, cluster metrics, robustness strata, GradCAM
    /// heatmaps and attention correspondence maps for a checkpoint.
    Explain {
        /// Checkpoint archive (its .meta.json must sit next to it).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of test pairs to export per-pair bundles for.
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        /// Export each attention head separately besides the head average.
        #[arg(long)]
        per_head: bool,
        /// Rasterize heatmaps and attention grids to grayscale PNGs besides
        /// the CSV data files.
        #[arg(long)]
        render: bool,
    },
}

/// Executes a parsed invocation. The process-level entry point maps the
/// returned error to its exit code.
pub fn run(cli: Cli) -> Result<()> {
    let mut overrides = Overrides {
        seed: cli.common.seed,
        variant: None,
        data_root: cli.common.data.clone(),
        out: cli.common.out.clone(),
        strict: cli.common.strict.then_some(true),
    };
    if let Command::Train { variant: Some(v), .. } = &cli.command {
        overrides.variant = Some(Variant::parse(v)?);
    }
    let mut cfg =
        RunConfig::resolve(cli.common.profile.as_deref(), cli.common.config.as_deref(), &overrides)?;
    if let Some(threads) = cli.common.threads {
        if threads == 0 {
            return Err(Error::config("--threads must be at least 1"));
        }
        if threads > 1 {
            println!("note: this build runs numerics on one thread; --threads {threads} ignored");
        }
    }

    match cli.command {
        Command::Synth { spec, force } => cmd_synth(&cfg, spec.as_deref(), force),
        Command::Train { resume, save_state, stop_after_epoch, .. } => {
            cfg.train.save_state |= save_state;
            if stop_after_epoch.is_some() {
                cfg.train.stop_after_epoch = stop_after_epoch;
            }
            cmd_train(&cfg, resume)
        }
        Command::Eval { checkpoint, topk, compare } => {
            if let Some(k) = topk {
                cfg.eval.topk = k;
                cfg.eval.validate()?;
            }
            cmd_eval(&mut cfg, &checkpoint, compare.as_deref())
        }
        Command::AblateStage => cmd_ablate_stage(&cfg),
        Command::Explain { checkpoint, pairs, per_head, render } => {
            cmd_explain(&mut cfg, &checkpoint, pairs, per_head, render)
        }
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(cfg: &RunConfig, spec_path: Option<&Path>, force: bool) -> Result<()> {
    let out = cfg.require_out()?;
    let spec = match spec_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            let mut de = serde_json::Deserializer::from_str(&text);
            // Path-aware deserialization so a bad value names its field, not
            // just a byte offset.
            serde_path_to_error::deserialize::<_, synth::SynthSpec>(&mut de).map_err(|e| {
                Error::config(format!("{}: field {}: {}", path.display(), e.path(), e.inner()))
            })?
        }
        None => synth::SynthSpec::default(),
    };
    spec.validate()?;

    if out.exists() && std::fs::read_dir(&out)?.next().is_some() {
        if !force {
            return Err(Error::config(format!(
                "output directory {} is not empty; pass --force to replace it",
                out.display()
            )));
        }
        std::fs::remove_dir_all(&out)?;
    }
    std::fs::create_dir_all(&out)?;
    cfg.write_resolved(&out)?;
    std::fs::write(
        out.join("spec.json"),
        serde_json::to_string_pretty(&spec)
            .map_err(|e| Error::format(format!("serializing generator spec: {e}")))?,
    )?;
    let (_, summary) = synth::generate(&spec, cfg.train.seed, &out)?;

    println!("dataset written to {}", out.display());
    println!(
        "  patients: {} ({} LR / {} cCR)",
        summary.patients, summary.lr_patients, summary.ccr_patients
    );
    println!("  images: {}", summary.images);
    println!("  pairs: {} train / {} test", summary.train_pairs, summary.test_pairs);
    if summary.artifact_counts.is_empty() {
        println!("  artifacts: none");
    } else {
        let parts: Vec<String> =
            summary.artifact_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("  artifacts: {}", parts.join(" "));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let data_root = cfg.require_data_root()?;
    let out = cfg.require_out()?;
    std::fs::create_dir_all(&out)?;
    cfg.write_resolved(&out)?;
    let manifest = Manifest::load(&data_root.join("manifest.jsonl"))?;
    let model = Model::new(cfg.model.clone())?;
    let store = ImageStore::new(&manifest, cfg.model.encoder.image_size, Normalization::default());
    println!(
        "training {} on {} patients, {} folds, seed {}",
        cfg.model.variant.as_str(),
        manifest.patients().len(),
        cfg.train.fold_count,
        cfg.train.seed
    );
    let (report, _) =
        cross_validate(&model, &manifest, &store, &cfg.train, &cfg.eval, &out, resume)?;
    print_cv_report(&report);
    println!("artifacts in {}", out.display());
    fail_on_fold_errors(&report)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => "--".into(),
    }
}

fn print_cv_report(report: &CvReport) {
    for f in &report.folds {
        match f.status.as_str() {
            "ok" => println!(
                "  fold {}: best epoch {}, test balanced accuracy {}, train accuracy {}",
                f.fold,
                f.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "--".into()),
                fmt_opt(f.metrics.as_ref().and_then(|m| m.balanced_accuracy)),
                fmt_opt(f.final_train_accuracy),
            ),
            _ => println!(
                "  fold {}: {} ({})",
                f.fold,
                f.status,
                f.message.as_deref().unwrap_or("no detail")
            ),
        }
    }
    for (name, agg) in &report.aggregates {
        println!("  {name}: {:.2} +/- {:.2}", agg.mean, agg.std);
    }
    for w in &report.warnings {
        println!("  warning: {w}");
    }
}

/// Converts fold failures recorded in a CV report back into the error class
/// (and thus exit code) of the first failing fold.
fn fail_on_fold_errors(report: &CvReport) -> Result<()> {
    let failed: Vec<&FoldSummary> =
        report.folds.iter().filter(|f| f.status == "failed").collect();
    let Some(first) = failed.first() else {
        return Ok(());
    };
    let ids: Vec<String> = failed.iter().map(|f| f.fold.to_string()).collect();
    // The stored message is a full error display; drop its class prefix so
    // re-wrapping does not repeat it.
    let detail = first.message.as_deref().unwrap_or("unknown error");
    let detail = [
        "configuration error: ",
        "numerical abort: ",
        "artifact mismatch: ",
        "format error: ",
    ]
    .iter()
    .find_map(|p| detail.strip_prefix(p))
    .unwrap_or(detail);
    let msg = format!("fold {} failed: {detail}", ids.join(", "));
    Err(match first.error_exit_code {
        Some(2) => Error::config(msg),
        Some(3) => Error::numerical(msg),
        Some(4) => Error::artifact_mismatch(msg),
        _ => Error::format(msg),
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Loads a checkpoint after verifying it belongs to the active configuration.
///
/// The checkpoint metadata names the variant it was trained as; that variant
/// is adopted into `cfg` (so one config file can evaluate all three variants'
/// checkpoints), after which the config fingerprint and the parameter
/// checksum must both match or the command aborts with an artifact mismatch.
fn load_verified_checkpoint(
    cfg: &mut RunConfig,
    checkpoint: &Path,
) -> Result<(Model, ParamSet<f32>, CheckpointMeta)> {
    let meta_path = checkpoint.with_extension("meta.json");
    let meta = CheckpointMeta::load(&meta_path)?;
    cfg.model.variant = Variant::parse(&meta.variant)?;
    let expected = config_fingerprint(&cfg.model, &cfg.train);
    if expected != meta.config_hash {
        return Err(Error::artifact_mismatch(format!(
            "checkpoint {} was trained under config {}, but the active config hashes to {expected}",
            checkpoint.display(),
            meta.config_hash
        )));
    }
    let model = Model::new(cfg.model.clone())?;
    let template: ParamSet<f32> = model.init_params(0);
    let params = load_checkpoint(checkpoint, &template)?;
    let checksum = params.checksum();
    if checksum != meta.params_checksum {
        return Err(Error::artifact_mismatch(format!(
            "checkpoint {} fails its integrity check: metadata records checksum {}, archive hashes to {checksum}",
            checkpoint.display(),
            meta.params_checksum
        )));
    }
    Ok((model, params, meta))
}

fn print_metrics(metrics: &MetricsReport) {
    let n = metrics.tp + metrics.tn + metrics.fp + metrics.fn_;
    println!(
        "  n={n} tp={} tn={} fp={} fn={}",
        metrics.tp, metrics.tn, metrics.fp, metrics.fn_
    );
    println!("  balanced accuracy: {}", fmt_opt(metrics.balanced_accuracy));
    println!("  sensitivity: {}", fmt_opt(metrics.sensitivity));
    println!("  specificity: {}", fmt_opt(metrics.specificity));
    println!("  accuracy: {}", fmt_opt(metrics.accuracy));
}

#[derive(Debug, Serialize)]
struct ComparisonReport {
    /// Number of matched same-day groups.
    n: usize,
    /// Paired t-test over per-group true-class probabilities (this run
    /// minus the comparison run); positive mean_diff favors this run.
    test: PairedTTest,
}

/// Probability the model assigned to the group's true class.
fn true_class_probability(r: &PredictionRecord) -> f64 {
    if r.label >= 0.5 {
        r.probability
    } else {
        1.0 - r.probability
    }
}

/// Pairs two aggregated prediction sets by same-day group and t-tests the
/// per-group true-class probabilities.
fn compare_predictions(
    ours: &[PredictionRecord],
    other: &[PredictionRecord],
) -> Result<ComparisonReport> {
    let map: BTreeMap<&str, &PredictionRecord> =
        other.iter().map(|r| (r.same_day_group.as_str(), r)).collect();
    if map.len() != ours.len() {
        return Err(Error::artifact_mismatch(format!(
            "prediction sets cover different groups: {} here vs {} in the comparison file",
            ours.len(),
            map.len()
        )));
    }
    let mut a = Vec::with_capacity(ours.len());
    let mut b = Vec::with_capacity(ours.len());
    for r in ours {
        let Some(o) = map.get(r.same_day_group.as_str()) else {
            return Err(Error::artifact_mismatch(format!(
                "comparison file lacks group {}; both runs must score the same test set",
                r.same_day_group
            )));
        };
        if o.label != r.label {
            return Err(Error::artifact_mismatch(format!(
                "group {} has label {} here but {} in the comparison file",
                r.same_day_group, r.label, o.label
            )));
        }
        a.push(true_class_probability(r));
        b.push(true_class_probability(o));
    }
    Ok(ComparisonReport { n: a.len(), test: paired_t_test(&a, &b)? })
}

fn cmd_eval(cfg: &mut RunConfig, checkpoint: &Path, compare: Option<&Path>) -> Result<()> {
    let data_root = cfg.require_data_root()?;
    let out = cfg.require_out()?;
    let (model, params, meta) = load_verified_checkpoint(cfg, checkpoint)?;
    std::fs::create_dir_all(&out)?;
    cfg.write_resolved(&out)?;

    let manifest = Manifest::load(&data_root.join("manifest.jsonl"))?;
    let store = ImageStore::new(&manifest, cfg.model.encoder.image_size, Normalization::default());
    let (pairs, warnings) = build_pairs(&manifest, PairMode::Test);
    for w in &warnings {
        println!("warning: {w}");
    }
    if pairs.is_empty() {
        return Err(Error::config("the manifest yields no test pairs"));
    }

    let raw = score_pairs(&model, &params, &store, &manifest, &pairs, cfg.train.batch_size)?;
    let (aggregated, metrics) = cfg.eval.evaluate(&raw)?;
    std::fs::write(out.join("raw_pairs.csv"), predictions_csv(&raw))?;
    std::fs::write(out.join("predictions.csv"), predictions_csv(&aggregated))?;
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)
            .map_err(|e| Error::format(format!("serializing metrics: {e}")))?,
    )?;
    println!(
        "evaluated {} checkpoint (fold {}, epoch {}) on {} pairs in {} groups",
        meta.variant,
        meta.fold,
        meta.epoch,
        raw.len(),
        aggregated.len()
    );
    print_metrics(&metrics);

    if let Some(path) = compare {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let other = parse_predictions_csv(&text)?;
        let report = compare_predictions(&aggregated, &other)?;
        std::fs::write(
            out.join("comparison.json"),
            serde_json::to_string_pretty(&report)
                .map_err(|e| Error::format(format!("serializing comparison: {e}")))?,
        )?;
        let t = &report.test;
        if t.degenerate {
            println!(
                "comparison vs {}: all {} per-group differences identical (mean {:+.4}); t-test withheld",
                path.display(),
                report.n,
                t.mean_diff
            );
        } else {
            println!(
                "comparison vs {}: mean diff {:+.4}, t={:.4} (dof {}), p={:.4}, 95% CI [{:.4}, {:.4}]",
                path.display(),
                t.mean_diff,
                t.t,
                t.dof,
                t.p_two_sided.unwrap_or(f64::NAN),
                t.ci95.map(|c| c.0).unwrap_or(f64::NAN),
                t.ci95.map(|c| c.1).unwrap_or(f64::NAN),
            );
        }
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate-stage
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct AblationRow {
    stage: usize,
    tokens: usize,
    balanced_accuracy_mean: Option<f64>,
    balanced_accuracy_std: Option<f64>,
    sensitivity_mean: Option<f64>,
    specificity_mean: Option<f64>,
    failed_folds: usize,
    flag: String,
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut csv = String::from(
        "stage,tokens,balanced_accuracy_mean,balanced_accuracy_std,sensitivity_mean,specificity_mean,failed_folds,flag\n",
    );
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.stage,
            r.tokens,
            cell(r.balanced_accuracy_mean),
            cell(r.balanced_accuracy_std),
            cell(r.sensitivity_mean),
            cell(r.specificity_mean),
            r.failed_folds,
            r.flag
        ));
    }
    csv
}

fn cmd_ablate_stage(cfg: &RunConfig) -> Result<()> {
    if cfg.model.variant != Variant::Ssdca {
        return Err(Error::config(format!(
            "stage ablation varies the cross-attention fusion stage and needs variant=ssdca, got {}",
            cfg.model.variant.as_str()
        )));
    }
    let data_root = cfg.require_data_root()?;
    let out = cfg.require_out()?;
    std::fs::create_dir_all(&out)?;
    cfg.write_resolved(&out)?;
    let manifest = Manifest::load(&data_root.join("manifest.jsonl"))?;
    let store = ImageStore::new(&manifest, cfg.model.encoder.image_size, Normalization::default());

    let mut rows = Vec::new();
    let mut first_error: Option<Error> = None;
    for stage in 1..=4 {
        let mut stage_cfg = cfg.clone();
        stage_cfg.model.fusion_stage = stage;
        let stage_out = out.join(format!("stage{stage}"));
        stage_cfg.out = Some(stage_out.clone());
        let model = Model::new(stage_cfg.model.clone())?;
        let tokens = model.fusion_tokens();
        println!("stage {stage}: {tokens} tokens");
        std::fs::create_dir_all(&stage_out)?;
        stage_cfg.write_resolved(&stage_out)?;
        let (report, _) = cross_validate(
            &model,
            &manifest,
            &store,
            &stage_cfg.train,
            &stage_cfg.eval,
            &stage_out,
            false,
        )?;
        let agg = |name: &str| report.aggregates.get(name);
        rows.push(AblationRow {
            stage,
            tokens,
            balanced_accuracy_mean: agg("balanced_accuracy").map(|a| a.mean),
            balanced_accuracy_std: agg("balanced_accuracy").map(|a| a.std),
            sensitivity_mean: agg("sensitivity").map(|a| a.mean),
            specificity_mean: agg("specificity").map(|a| a.mean),
            failed_folds: report.failed_folds().len(),
            flag: String::new(),
        });
        if first_error.is_none() {
            if let Err(e) = fail_on_fold_errors(&report) {
                first_error = Some(e);
            }
        }
    }

    // The full-resolution comparison point is the last stage; flag it when a
    // shallower fusion point beat it on this dataset (no hard assertion: the
    // best stage is data-dependent).
    let best = rows
        .iter()
        .max_by(|x, y| {
            let xa = x.balanced_accuracy_mean.unwrap_or(f64::NEG_INFINITY);
            let ya = y.balanced_accuracy_mean.unwrap_or(f64::NEG_INFINITY);
            xa.partial_cmp(&ya).expect("finite means")
        })
        .map(|r| r.stage)
        .unwrap_or(4);
    if best != 4 {
        if let Some(last) = rows.iter_mut().find(|r| r.stage == 4) {
            last.flag = format!("not-best(best=stage{best})");
        }
    }

    std::fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
    println!("stage  tokens  balanced_accuracy  flag");
    for r in &rows {
        println!(
            "{:>5}  {:>6}  {:>10} +/- {:<6}  {}",
            r.stage,
            r.tokens,
            fmt_opt(r.balanced_accuracy_mean),
            fmt_opt(r.balanced_accuracy_std),
            if r.flag.is_empty() { "-" } else { &r.flag }
        );
    }
    println!("table in {}", out.join("ablation.csv").display());
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// explain
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct MaskInfo {
    kind: String,
    cx: f64,
    cy: f64,
    radius: f64,
}

impl From<&synth::PlantedMask> for MaskInfo {
    fn from(m: &synth::PlantedMask) -> Self {
        MaskInfo {
            kind: match m.kind {
                synth::SignatureKind::Lesion => "lesion".into(),
                synth::SignatureKind::Scar => "scar".into(),
            },
            cx: m.cx,
            cy: m.cy,
            radius: m.radius,
        }
    }
}

#[derive(Debug, Serialize)]
struct AttentionInfo {
    /// Flattened pre-grid index whose attention row was exported.
    query_cell: usize,
    /// Flattened post-grid index that row attends to most.
    argmax_cell: usize,
    /// Whether the argmax falls inside the post image's planted mask
    /// (absent when the dataset ships no masks).
    #[serde(skip_serializing_if = "Option::is_none")]
    argmax_in_post_mask: Option<bool>,
}

#[derive(Debug, Serialize)]
struct PairInfo {
    patient_id: String,
    pre_image: String,
    post_image: String,
    label: f64,
    probability: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pre_mask: Option<MaskInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    post_mask: Option<MaskInfo>,
    /// IoU between the top decile of the GradCAM heatmap (computed over the
    /// pre image) and each planted mask, when masks exist.
    #[serde(skip_serializing_if = "Option::is_none")]
    gradcam_top_decile_iou_pre_mask: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gradcam_top_decile_iou_post_mask: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention: Option<AttentionInfo>,
}

/// Deterministically picks up to `n` test-pair indices, alternating classes
/// so bundles show both outcomes.
fn select_pairs(pairs: &[crate::data::LongitudinalPair], n: usize) -> Vec<usize> {
    let lr: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].label >= 0.5).collect();
    let ccr: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].label < 0.5).collect();
    let mut picked = Vec::new();
    let mut it_lr = lr.into_iter();
    let mut it_ccr = ccr.into_iter();
    while picked.len() < n.min(pairs.len()) {
        let before = picked.len();
        if let Some(i) = it_lr.next() {
            picked.push(i);
        }
        if picked.len() < n.min(pairs.len()) {
            if let Some(i) = it_ccr.next() {
                picked.push(i);
            }
        }
        if picked.len() == before {
            break;
        }
    }
    picked
}

/// Writes a row-major value grid as an 8-bit grayscale PNG, min-max
/// normalized (a constant grid renders black).
fn write_gray_png(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    debug_assert_eq!(values.len(), width * height);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> =
        values.iter().map(|&v| (((v - lo) / span) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn cmd_explain(
    cfg: &mut RunConfig,
    checkpoint: &Path,
    n_pairs: usize,
    per_head: bool,
    render: bool,
) -> Result<()> {
    let data_root = cfg.require_data_root()?;
    let out = cfg.require_out()?;
    let (model, params, _meta) = load_verified_checkpoint(cfg, checkpoint)?;
    std::fs::create_dir_all(&out)?;
    cfg.write_resolved(&out)?;

    let manifest = Manifest::load(&data_root.join("manifest.jsonl"))?;
    let store = ImageStore::new(&manifest, cfg.model.encoder.image_size, Normalization::default());
    let (pairs, warnings) = build_pairs(&manifest, PairMode::Test);
    for w in &warnings {
        println!("warning: {w}");
    }
    if pairs.is_empty() {
        return Err(Error::config("the manifest yields no test pairs"));
    }

    // Predictions, metrics, and the artifact-stratified robustness report.
    let raw = score_pairs(&model, &params, &store, &manifest, &pairs, cfg.train.batch_size)?;
    let (aggregated, metrics) = cfg.eval.evaluate(&raw)?;
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)
            .map_err(|e| Error::format(format!("serializing metrics: {e}")))?,
    )?;
    let robustness = robustness_report(&aggregated, cfg.eval.threshold);
    std::fs::write(out.join("robustness_metrics.csv"), robustness_metrics_csv(&robustness))?;
    std::fs::write(out.join("robustness_histogram.csv"), robustness_histogram_csv(&robustness))?;
    for note in &robustness.notes {
        println!("robustness: {note}");
    }

    // Embeddings, deterministic 2-D projection, and cluster separation.
    let embeddings =
        extract_embeddings(&model, &params, &store, &manifest, &pairs, cfg.train.batch_size)?;
    std::fs::write(out.join("embeddings.csv"), embeddings_csv(&embeddings))?;
    let (clusters, projected) = cluster_report(&embeddings, Projection::Pca)?;
    for w in &projected.warnings {
        println!("projection: {w}");
    }
    std::fs::write(out.join("projection.csv"), projection_csv(&embeddings, &projected.coords))?;
    std::fs::write(
        out.join("cluster_metrics.json"),
        serde_json::to_string_pretty(&clusters)
            .map_err(|e| Error::format(format!("serializing cluster metrics: {e}")))?,
    )?;
    println!(
        "cluster separation: raw inter {:.4} / intra {:.4}; projected inter {:.4} / intra {:.4}",
        clusters.raw.inter, clusters.raw.intra, clusters.projected.inter, clusters.projected.intra
    );

    // Per-pair interpretability bundles.
    let masks = synth::load_masks(&data_root.join("masks.json")).ok();
    let selected = select_pairs(&pairs, n_pairs);
    let mut skipped_attention_note = false;
    for (k, &idx) in selected.iter().enumerate() {
        let pair = &pairs[idx];
        let dir = out.join(format!("pair{k}"));
        std::fs::create_dir_all(&dir)?;
        let pre_rec = &manifest.records[pair.pre];
        let post_rec = &manifest.records[pair.post];
        let (pre_t, post_t) = pair_tensors::<f32>(&store, &manifest, pair)?;

        let heat = gradcam(
            &model,
            &params,
            &pre_t,
            model.cfg.variant.uses_pair().then_some(&post_t),
            false,
        )?;
        for w in &heat.warnings {
            println!("pair{k}: {w}");
        }
        std::fs::write(dir.join("gradcam_grid.csv"), grid_csv(&heat.values, heat.grid))?;
        std::fs::write(
            dir.join("gradcam_upsampled.csv"),
            grid_csv(&heat.upsampled, heat.image_px),
        )?;
        if render {
            write_gray_png(&dir.join("gradcam.png"), &heat.upsampled, heat.image_px, heat.image_px)?;
        }

        let pre_mask = masks.as_ref().and_then(|m| m.get(&pre_rec.image_path));
        let post_mask = masks.as_ref().and_then(|m| m.get(&post_rec.image_path));
        let top = heat.top_fraction_mask(0.1);
        let iou_of = |mask: Option<&synth::PlantedMask>| {
            mask.map(|m| mask_iou(&top, &m.rasterize(heat.image_px)))
        };

        let mut info = PairInfo {
            patient_id: pair.patient_id.clone(),
            pre_image: pre_rec.image_path.clone(),
            post_image: post_rec.image_path.clone(),
            label: pair.label,
            probability: raw[idx].probability,
            pre_mask: pre_mask.map(MaskInfo::from),
            post_mask: post_mask.map(MaskInfo::from),
            gradcam_top_decile_iou_pre_mask: iou_of(pre_mask),
            gradcam_top_decile_iou_post_mask: iou_of(post_mask),
            attention: None,
        };

        if model.cfg.variant == Variant::Ssdca {
            let maps = attention_correspondence(&model, &params, &pre_t, &post_t, per_head)?;
            let t = maps.tokens();
            std::fs::write(dir.join("attention_pre_to_post.csv"), grid_csv(&maps.pre_to_post, t))?;
            std::fs::write(dir.join("attention_post_to_pre.csv"), grid_csv(&maps.post_to_pre, t))?;
            if render {
                write_gray_png(&dir.join("attention_pre_to_post.png"), &maps.pre_to_post, t, t)?;
                write_gray_png(&dir.join("attention_post_to_pre.png"), &maps.post_to_pre, t, t)?;
            }
            if let Some(heads) = &maps.per_head {
                for (h, (fwd, bwd)) in heads.iter().enumerate() {
                    std::fs::write(dir.join(format!("attention_pre_to_post_head{h}.csv")), grid_csv(fwd, t))?;
                    std::fs::write(dir.join(format!("attention_post_to_pre_head{h}.csv")), grid_csv(bwd, t))?;
                }
            }
            // Export the attention row of the most informative pre cell: the
            // planted-mask center when masks exist, the grid center otherwise.
            let query_cell = pre_mask
                .map(|m| grid_cell_of(maps.grid, m.cx, m.cy))
                .unwrap_or_else(|| grid_cell_of(maps.grid, 0.5, 0.5));
            let row = maps.query_map(true, query_cell);
            std::fs::write(dir.join("attention_query_map.csv"), grid_csv(&row, maps.grid))?;
            let argmax_cell = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite attention"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let argmax_in_post_mask = post_mask.map(|m| {
                grid_mask_of_disk(maps.grid, m.cx, m.cy, m.radius)[argmax_cell]
            });
            info.attention = Some(AttentionInfo { query_cell, argmax_cell, argmax_in_post_mask });
        } else if !skipped_attention_note {
            println!(
                "attention maps need the dual cross-attention variant; {} checkpoints export GradCAM only",
                model.cfg.variant.as_str()
            );
            skipped_attention_note = true;
        }

        std::fs::write(
            dir.join("pair_info.json"),
            serde_json::to_string_pretty(&info)
                .map_err(|e| Error::format(format!("serializing pair info: {e}")))?,
        )?;
    }
    println!(
        "wrote {} pair bundle(s), embeddings for {} pairs, {} robustness strata to {}",
        selected.len(),
        embeddings.len(),
        robustness.strata.len(),
        out.display()
    );
    Ok(())
}

// DATA_ROOT_ENV is re-exported through the config module; referencing it here
// keeps the help text and the implementation in one place.
const _: &str = DATA_ROOT_ENV;
