//! Optimization loop: Adam with a linear warmup/decay schedule, balanced
//! sampling, per-fold best-validation checkpointing, and cross-fold
//! aggregation.
//!
//! Everything is deterministic given the configured seed: sampling,
//! augmentation, dropout, and parameter initialization all run on named
//! ChaCha streams, and all reductions are sequential.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{load_checkpoint, read_f64_records, save_archive};
use crate::data::{
    build_pairs, stratified_kfold, Augmentation, BalancedSampler, ImageStore, LongitudinalPair,
    Manifest, PairMode, SplitPlan,
};
use crate::error::Error;
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::stats::{compute_metrics, MetricsReport, PredictionRecord, TopkCombiner};
use crate::tensor::{Scalar, Tensor};
use crate::{seeded_rng, Result};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub fold_count: usize,
    pub seed: u64,
    /// Hold the peak rate after warmup instead of decaying to zero.
    pub constant_after_warmup: bool,
    /// Train-time dihedral augmentation of each image independently.
    pub augment: bool,
    /// Optimizer steps per epoch. `None` derives one nominal pass,
    /// `ceil(train_pairs / batch_size)`; balanced sampling draws with
    /// replacement either way, so this only sets the epoch length.
    pub steps_per_epoch: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Write a resumable training-state snapshot at the end of every epoch.
    pub save_state: bool,
    /// Pause the fold after this many completed epochs (implies state
    /// saving); a later run with `resume` continues from the snapshot.
    pub stop_after_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            warmup_epochs: 10,
            total_epochs: 30,
            batch_size: 8,
            fold_count: 5,
            seed: 0,
            constant_after_warmup: false,
            augment: true,
            steps_per_epoch: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            save_state: false,
            stop_after_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(format!(
                "warmup epochs ({}) must be fewer than total epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.fold_count < 2 {
            return Err(Error::config(format!(
                "fold count must be at least 2, got {}",
                self.fold_count
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps per epoch must be at least 1 when set"));
        }
        if let Some(stop) = self.stop_after_epoch {
            if stop == 0 || stop >= self.total_epochs {
                return Err(Error::config(format!(
                    "stop_after_epoch must lie in 1..{} (exclusive), got {stop}",
                    self.total_epochs
                )));
            }
        }
        Ok(())
    }
}

/// Evaluation protocol shared by validation, testing, and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    /// Same-day group aggregation size.
    pub topk: usize,
    pub threshold: f64,
    pub combiner: TopkCombiner,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol { topk: 3, threshold: 0.5, combiner: TopkCombiner::Mean }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.topk == 0 {
            return Err(Error::config("top-k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!(
                "decision threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Aggregates same-day groups and scores the result.
    pub fn evaluate(
        &self,
        records: &[PredictionRecord],
    ) -> Result<(Vec<PredictionRecord>, MetricsReport)> {
        let aggregated = crate::stats::aggregate_groups(records, self.topk, self.combiner)?;
        let metrics = compute_metrics(&aggregated, self.threshold);
        Ok((aggregated, metrics))
    }
}

/// Stable fingerprint of the model + training configuration, recorded in
/// checkpoint metadata so archives can be matched to the run that made them.
///
/// Execution-control knobs (`save_state`, `stop_after_epoch`) are excluded:
/// they change when and whether a run pauses, not what it computes, and a
/// resumed run must hash identically to the uninterrupted one.
pub fn config_fingerprint(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> String {
    let mut sanitized = train_cfg.clone();
    sanitized.save_state = false;
    sanitized.stop_after_epoch = None;
    let blob = serde_json::json!({ "model": model_cfg, "train": sanitized });
    let mut hasher = Sha256::new();
    hasher.update(blob.to_string().as_bytes());
    format!("{:x}", hasher.finalize())
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Piecewise-linear schedule: ramp `lr*(epoch+1)/warmup` during warmup, then
/// linear decay `lr*(total-epoch)/(total-warmup)` toward zero (or a constant
/// hold when configured). Continuous at the junction with peak exactly `lr`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::config(format!(
            "epoch {epoch} out of range (total epochs {})",
            cfg.total_epochs
        )));
    }
    let lr = cfg.learning_rate;
    if epoch < cfg.warmup_epochs {
        Ok(lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64)
    } else if cfg.constant_after_warmup {
        Ok(lr)
    } else {
        Ok(lr * (cfg.total_epochs - epoch) as f64 / (cfg.total_epochs - cfg.warmup_epochs) as f64)
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct MomentSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Double-precision master copy of the parameter; the model's working
    /// copy is refreshed from it after every step.
    master: Vec<f64>,
}

/// Adam optimizer state: per-parameter first/second moments plus a step
/// counter. All arithmetic runs in f64 regardless of the model precision.
pub struct AdamState {
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    slots: BTreeMap<String, MomentSlot>,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState { step: 0, beta1, beta2, epsilon, slots: BTreeMap::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamState::new(cfg.beta1, cfg.beta2, cfg.epsilon)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First moment of a parameter, if the optimizer has seen it.
    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.slots.get(name).map(|s| s.m.as_slice())
    }

    /// Flattens the optimizer state into named f64 vectors
    /// (`m.<param>` / `v.<param>` / `master.<param>`) for snapshotting.
    pub fn export_records(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, slot) in &self.slots {
            out.insert(format!("m.{name}"), slot.m.clone());
            out.insert(format!("v.{name}"), slot.v.clone());
            out.insert(format!("master.{name}"), slot.master.clone());
        }
        out
    }

    /// Rebuilds the optimizer from snapshot records written by
    /// [`AdamState::export_records`].
    pub fn from_records(
        cfg: &TrainConfig,
        step: u64,
        records: &BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let mut state = AdamState::from_config(cfg);
        state.step = step;
        for (key, values) in records {
            let Some(name) = key.strip_prefix("master.") else { continue };
            let m = records
                .get(&format!("m.{name}"))
                .ok_or_else(|| Error::format(format!("state snapshot missing `m.{name}`")))?;
            let v = records
                .get(&format!("v.{name}"))
                .ok_or_else(|| Error::format(format!("state snapshot missing `v.{name}`")))?;
            if m.len() != values.len() || v.len() != values.len() {
                return Err(Error::format(format!(
                    "state snapshot for `{name}` has mismatched lengths ({}, {}, {})",
                    m.len(),
                    v.len(),
                    values.len()
                )));
            }
            state.slots.insert(
                name.to_string(),
                MomentSlot { m: m.clone(), v: v.clone(), master: values.clone() },
            );
        }
        Ok(state)
    }

    /// Writes the master weights into `params`, casting to the model
    /// precision. Parameters the optimizer never touched stay as they are.
    pub fn restore_params<F: Scalar>(&self, params: &mut ParamSet<F>) -> Result<()> {
        for (name, slot) in &self.slots {
            let expected = params.get(name)?.values.len();
            if expected != slot.master.len() {
                return Err(Error::shape(format!(
                    "state snapshot for `{name}` has {} elements, parameter has {expected}",
                    slot.master.len()
                )));
            }
            let cast: Vec<F> = slot.master.iter().map(|&v| F::from_f64(v)).collect();
            params.set_values(name, cast);
        }
        Ok(())
    }

    /// One bias-corrected Adam update over every gradient entry.
    ///
    /// `context` is appended to diagnostics (e.g. fold/epoch/step) so a
    /// non-finite gradient abort names both the tensor and where it happened.
    pub fn step<F: Scalar>(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        context: &str,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite gradient in tensor `{name}` (element {pos}){context}"
                )));
            }
            if !self.slots.contains_key(name) {
                let param = params.get(name)?;
                let master = param.values.iter().map(|v| v.to_f64()).collect::<Vec<f64>>();
                if master.len() != g.len() {
                    return Err(Error::shape(format!(
                        "gradient for `{name}` has {} elements, parameter has {}",
                        g.len(),
                        master.len()
                    )));
                }
                self.slots.insert(
                    name.clone(),
                    MomentSlot { m: vec![0.0; g.len()], v: vec![0.0; g.len()], master },
                );
            }
            let slot = self.slots.get_mut(name).expect("just inserted");
            if slot.master.len() != g.len() {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has {} elements, parameter has {}",
                    g.len(),
                    slot.master.len()
                )));
            }
            for i in 0..g.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                slot.master[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            let cast: Vec<F> = slot.master.iter().map(|&v| F::from_f64(v)).collect();
            params.set_values(name, cast);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Curves and checkpoint metadata
// ---------------------------------------------------------------------------

/// One logged scalar: `(epoch, split, metric, value)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Renders curve points as the canonical CSV.
pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,split,metric,value\n");
    for p in points {
        writeln!(out, "{},{},{},{:.6}", p.epoch, p.split, p.metric, p.value).expect("string write");
    }
    out
}

/// Sidecar JSON stored next to each checkpoint archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub variant: String,
    pub fold: usize,
    pub epoch: usize,
    pub val_balanced_accuracy: f64,
    pub params_checksum: String,
}

impl CheckpointMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("serializing checkpoint metadata: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Batch assembly and scoring
// ---------------------------------------------------------------------------

/// Stacks the pre and post images of `pairs` into `[B*side*side, 3]` tensors.
/// With `augment`, each image independently receives a random dihedral
/// transform drawn from `rng`.
pub fn batch_tensors<F: Scalar>(
    store: &ImageStore,
    manifest: &Manifest,
    pairs: &[&LongitudinalPair],
    mut augment_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<(Tensor<F>, Tensor<F>, Vec<f64>)> {
    let side = store.side();
    let pixels = side * side;
    let mut pre = Vec::with_capacity(pairs.len() * pixels * 3);
    let mut post = Vec::with_capacity(pairs.len() * pixels * 3);
    let mut labels = Vec::with_capacity(pairs.len());
    for pair in pairs {
        for (slot, index) in [(&mut pre, pair.pre), (&mut post, pair.post)] {
            let buf = store.get(&manifest.records[index])?;
            let data = match augment_rng.as_deref_mut() {
                Some(rng) => Augmentation::sample(rng).apply(&buf, side, 3),
                None => buf.to_vec(),
            };
            slot.extend(data.iter().map(|&v| v as f64));
        }
        labels.push(pair.label);
    }
    let rows = pairs.len() * pixels;
    Ok((
        Tensor::from_f64_slice(&pre, vec![rows, 3]),
        Tensor::from_f64_slice(&post, vec![rows, 3]),
        labels,
    ))
}

/// Scores pairs in evaluation mode (no augmentation, no dropout) and returns
/// one prediction record per pair, artifacts taken from the post image.
pub fn score_pairs<F: Scalar>(
    model: &Model,
    params: &ParamSet<F>,
    store: &ImageStore,
    manifest: &Manifest,
    pairs: &[LongitudinalPair],
    batch_size: usize,
) -> Result<Vec<PredictionRecord>> {
    let leaves = params.leaves(false);
    let mut records = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&LongitudinalPair> = chunk.iter().collect();
        let (pre, post, _) = batch_tensors::<F>(store, manifest, &refs, None)?;
        let trace = model.forward(&pre, Some(&post), refs.len(), &leaves, None)?;
        let probs = trace.probabilities();
        for (pair, prob) in chunk.iter().zip(probs) {
            if !prob.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite probability for pair ({}, {})",
                    manifest.records[pair.pre].image_path, manifest.records[pair.post].image_path
                )));
            }
            records.push(PredictionRecord {
                patient_id: pair.patient_id.clone(),
                same_day_group: pair.same_day_group.clone(),
                probability: prob,
                label: pair.label,
                artifacts: manifest.records[pair.post].artifacts.clone(),
            });
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Fold training
// ---------------------------------------------------------------------------

/// JSON sidecar of a training-state snapshot; the heavy numeric state
/// (moments, master weights) lives in the companion f64 archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeMeta {
    pub config_hash: String,
    pub variant: String,
    pub fold: usize,
    /// Epochs fully finished; the resumed run starts at this epoch index.
    pub completed_epochs: usize,
    pub adam_step: u64,
    pub best_epoch: Option<usize>,
    pub best_val_balanced_accuracy: Option<f64>,
    /// ChaCha word positions of the three training streams, as decimal
    /// strings (u128 does not fit a JSON number).
    pub sampler_word_pos: String,
    pub augment_word_pos: String,
    pub dropout_word_pos: String,
    pub curves: Vec<CurvePoint>,
    pub warnings: Vec<String>,
}

impl ResumeMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("serializing training state: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn parse_word_pos(s: &str, what: &str) -> Result<u128> {
    s.parse::<u128>()
        .map_err(|_| Error::format(format!("training state has invalid {what} stream position `{s}`")))
}

/// A fold paused by `stop_after_epoch`, resumable from the snapshot files.
#[derive(Clone, Debug)]
pub struct PausedFold {
    pub fold: usize,
    pub completed_epochs: usize,
    pub state_meta_path: PathBuf,
    pub state_records_path: PathBuf,
}

/// Result of [`train_fold`]: either finished artifacts or a paused snapshot.
#[derive(Debug)]
pub enum FoldOutcome {
    Complete(Box<FoldArtifacts>),
    Paused(PausedFold),
}

impl FoldOutcome {
    /// Unwraps the completed artifacts; errors if the fold paused instead.
    pub fn into_complete(self) -> Result<FoldArtifacts> {
        match self {
            FoldOutcome::Complete(a) => Ok(*a),
            FoldOutcome::Paused(p) => Err(Error::config(format!(
                "fold {} paused after {} epochs; finish it with resume before using its artifacts",
                p.fold, p.completed_epochs
            ))),
        }
    }
}

/// Everything produced by one fold run.
#[derive(Clone, Debug)]
pub struct FoldArtifacts {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: f64,
    /// Plain accuracy of the end-of-training parameters over the fold's
    /// training pairs, evaluated cleanly (no augmentation). This measures
    /// fitting capacity; held-out metrics use the best checkpoint instead.
    pub final_train_accuracy: f64,
    pub curves: Vec<CurvePoint>,
    pub checkpoint_path: PathBuf,
    pub meta_path: PathBuf,
    /// Best checkpoint scored on the fold's held-out test pairs.
    pub test_metrics: MetricsReport,
    pub test_records: Vec<PredictionRecord>,
    pub warnings: Vec<String>,
}

/// Trains one fold end to end and writes its artifacts under
/// `out_dir/fold<k>/`: `best.ckpt`, `best.meta.json`, `curves.csv`,
/// `test_predictions.csv`. On divergence the curves collected so far are
/// still written before the error is returned.
///
/// With `save_state` (or `stop_after_epoch`) a snapshot (`state.json` +
/// `state.bin`) is written after every epoch; `resume` restores it and
/// continues where the previous run stopped, reproducing the uninterrupted
/// run exactly.
pub fn train_fold(
    model: &Model,
    manifest: &Manifest,
    store: &ImageStore,
    plan: &SplitPlan,
    fold: usize,
    cfg: &TrainConfig,
    protocol: &EvalProtocol,
    out_dir: &Path,
    resume: bool,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    protocol.validate()?;
    if fold >= plan.folds.len() {
        return Err(Error::config(format!(
            "fold {fold} out of range for a {}-fold plan",
            plan.folds.len()
        )));
    }
    let fold_dir = out_dir.join(format!("fold{fold}"));
    std::fs::create_dir_all(&fold_dir)?;

    let (train_patients, heldout_patients) = plan.split(fold);
    let train_manifest = manifest.subset(&train_patients);
    let heldout_manifest = manifest.subset(&heldout_patients);
    let (train_pairs, mut warnings) = build_pairs(&train_manifest, PairMode::Train);
    let (val_pairs, val_warnings) = build_pairs(&heldout_manifest, PairMode::Test);
    warnings.extend(val_warnings);
    if train_pairs.is_empty() {
        return Err(Error::config(format!("fold {fold}: no training pairs")));
    }
    if val_pairs.is_empty() {
        return Err(Error::config(format!("fold {fold}: no held-out pairs")));
    }
    let sampler = BalancedSampler::new(&train_pairs)?;

    let init_seed: u64 = seeded_rng(cfg.seed, &format!("fold{fold}.init")).gen();
    let mut params: ParamSet<f32> = model.init_params(init_seed);
    let dropout_seed: u64 = seeded_rng(cfg.seed, &format!("fold{fold}.dropout")).gen();
    let drops = model.dropouts(dropout_seed);
    let mut sampler_rng = seeded_rng(cfg.seed, &format!("fold{fold}.sampler"));
    let mut augment_rng = seeded_rng(cfg.seed, &format!("fold{fold}.augment"));
    let mut adam = AdamState::from_config(cfg);

    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| train_pairs.len().div_ceil(cfg.batch_size))
        .max(1);
    let fingerprint = config_fingerprint(&model.cfg, cfg);
    let checkpoint_path = fold_dir.join("best.ckpt");
    let meta_path = fold_dir.join("best.meta.json");
    let state_meta_path = fold_dir.join("state.json");
    let state_records_path = fold_dir.join("state.bin");

    let mut curves: Vec<CurvePoint> = Vec::new();
    let mut best_ba = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut start_epoch = 0usize;

    if resume {
        if !state_meta_path.exists() {
            return Err(Error::config(format!(
                "nothing to resume: no training state at {}",
                state_meta_path.display()
            )));
        }
        let meta = ResumeMeta::load(&state_meta_path)?;
        if meta.config_hash != fingerprint {
            return Err(Error::artifact_mismatch(format!(
                "training state at {} was written by config {} but the active config hashes to \
                 {fingerprint}",
                state_meta_path.display(),
                meta.config_hash
            )));
        }
        if meta.fold != fold {
            return Err(Error::artifact_mismatch(format!(
                "training state at {} belongs to fold {}, not fold {fold}",
                state_meta_path.display(),
                meta.fold
            )));
        }
        let records = read_f64_records(&state_records_path)?;
        adam = AdamState::from_records(cfg, meta.adam_step, &records)?;
        adam.restore_params(&mut params)?;
        sampler_rng.set_word_pos(parse_word_pos(&meta.sampler_word_pos, "sampler")?);
        augment_rng.set_word_pos(parse_word_pos(&meta.augment_word_pos, "augment")?);
        drops.set_rng_word_pos(parse_word_pos(&meta.dropout_word_pos, "dropout")?);
        start_epoch = meta.completed_epochs;
        curves = meta.curves;
        warnings = meta.warnings;
        if let (Some(e), Some(ba)) = (meta.best_epoch, meta.best_val_balanced_accuracy) {
            best_epoch = e;
            best_ba = ba;
        }
    }

    // Writes whatever curves exist; used on both success and abort paths.
    let flush_curves = |curves: &[CurvePoint]| -> Result<()> {
        std::fs::write(fold_dir.join("curves.csv"), curves_csv(curves))?;
        Ok(())
    };
    let save_state = |completed: usize,
                      adam: &AdamState,
                      sampler_rng: &rand_chacha::ChaCha8Rng,
                      augment_rng: &rand_chacha::ChaCha8Rng,
                      curves: &[CurvePoint],
                      warnings: &[String],
                      best_ba: f64,
                      best_epoch: usize|
     -> Result<()> {
        crate::archive::save_f64_records(&state_records_path, &adam.export_records())?;
        ResumeMeta {
            config_hash: fingerprint.clone(),
            variant: model.cfg.variant.as_str().to_string(),
            fold,
            completed_epochs: completed,
            adam_step: adam.step_count(),
            best_epoch: best_ba.is_finite().then_some(best_epoch),
            best_val_balanced_accuracy: best_ba.is_finite().then_some(best_ba),
            sampler_word_pos: sampler_rng.get_word_pos().to_string(),
            augment_word_pos: augment_rng.get_word_pos().to_string(),
            dropout_word_pos: drops.rng_word_pos().to_string(),
            curves: curves.to_vec(),
            warnings: warnings.to_vec(),
        }
        .save(&state_meta_path)
    };
    let snapshotting = cfg.save_state || cfg.stop_after_epoch.is_some();

    for epoch in start_epoch..cfg.total_epochs {
        let lr = lr_schedule(cfg, epoch)?;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for step in 0..steps_per_epoch {
            let indices: Vec<usize> =
                (0..cfg.batch_size).map(|_| sampler.draw(&mut sampler_rng)).collect();
            let refs: Vec<&LongitudinalPair> = indices.iter().map(|&i| &train_pairs[i]).collect();
            let aug = if cfg.augment { Some(&mut augment_rng) } else { None };
            let (pre, post, labels) = batch_tensors::<f32>(store, manifest, &refs, aug)?;
            // The same leaf snapshot must serve the forward pass and the
            // gradient read-back: backward() deposits gradients on exactly
            // these tensors.
            let leaves = params.leaves(true);
            let trace = model.forward(&pre, Some(&post), refs.len(), &leaves, Some(&drops))?;
            let loss = trace.logits.bce_with_logits_mean(&labels);
            let loss_val = loss.to_f64_vec()[0];
            let context = format!(" (fold {fold}, epoch {epoch}, step {step})");
            if !loss_val.is_finite() {
                flush_curves(&curves)?;
                return Err(Error::numerical(format!("non-finite training loss{context}")));
            }
            loss_sum += loss_val;
            for (p, l) in trace.probabilities().iter().zip(&labels) {
                if (*p >= 0.5) == (*l > 0.5) {
                    correct += 1;
                }
            }
            seen += labels.len();
            loss.backward();
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (name, tensor) in leaves.iter() {
                if let Some(g) = tensor.grad() {
                    grads.insert(name.clone(), g.iter().map(|v| v.to_f64()).collect());
                }
            }
            // The graph (and the leaf snapshot) is dropped before the update;
            // next step re-leafs the freshly updated ParamSet.
            drop(trace);
            drop(leaves);
            if let Err(e) = adam.step(&mut params, &grads, lr, &context) {
                flush_curves(&curves)?;
                return Err(e);
            }
        }
        let train_loss = loss_sum / steps_per_epoch as f64;
        let train_acc = correct as f64 / seen.max(1) as f64 * 100.0;

        // Validation balanced accuracy via the shared evaluation protocol.
        let val_records =
            score_pairs(model, &params, store, manifest, &val_pairs, cfg.batch_size)?;
        let (_, val_metrics) = protocol.evaluate(&val_records)?;
        let val_ba = match val_metrics.balanced_accuracy {
            Some(ba) => ba,
            None => {
                warnings.push(format!(
                    "fold {fold} epoch {epoch}: balanced accuracy undefined on held-out pairs"
                ));
                0.0
            }
        };

        curves.push(CurvePoint { epoch, split: "train".into(), metric: "loss".into(), value: train_loss });
        curves.push(CurvePoint { epoch, split: "train".into(), metric: "accuracy".into(), value: train_acc });
        curves.push(CurvePoint { epoch, split: "train".into(), metric: "lr".into(), value: lr });
        curves.push(CurvePoint { epoch, split: "val".into(), metric: "balanced_accuracy".into(), value: val_ba });
        if let Some(se) = val_metrics.sensitivity {
            curves.push(CurvePoint { epoch, split: "val".into(), metric: "sensitivity".into(), value: se });
        }
        if let Some(sp) = val_metrics.specificity {
            curves.push(CurvePoint { epoch, split: "val".into(), metric: "specificity".into(), value: sp });
        }

        // Strictly-greater comparison keeps the earliest epoch on ties.
        if val_ba > best_ba {
            best_ba = val_ba;
            best_epoch = epoch;
            save_archive(&checkpoint_path, &params)?;
            CheckpointMeta {
                config_hash: fingerprint.clone(),
                variant: model.cfg.variant.as_str().to_string(),
                fold,
                epoch,
                val_balanced_accuracy: val_ba,
                params_checksum: params.checksum(),
            }
            .save(&meta_path)?;
        }

        if snapshotting {
            save_state(
                epoch + 1,
                &adam,
                &sampler_rng,
                &augment_rng,
                &curves,
                &warnings,
                best_ba,
                best_epoch,
            )?;
        }
        if cfg.stop_after_epoch == Some(epoch + 1) {
            flush_curves(&curves)?;
            return Ok(FoldOutcome::Paused(PausedFold {
                fold,
                completed_epochs: epoch + 1,
                state_meta_path,
                state_records_path,
            }));
        }
    }
    flush_curves(&curves)?;

    // Reload the selected checkpoint and verify it reproduces the recorded
    // validation score exactly before computing final artifacts from it.
    let best_params: ParamSet<f32> = load_checkpoint(&checkpoint_path, &params)?;
    let val_records =
        score_pairs(model, &best_params, store, manifest, &val_pairs, cfg.batch_size)?;
    let (test_records, test_metrics) = protocol.evaluate(&val_records)?;
    let reloaded_ba = test_metrics.balanced_accuracy.unwrap_or(0.0);
    if reloaded_ba != best_ba {
        return Err(Error::numerical(format!(
            "fold {fold}: reloaded checkpoint scores {reloaded_ba} but {best_ba} was recorded"
        )));
    }

    // Clean train-set accuracy of the end-of-training parameters (plain, per
    // pair): the capacity measurement, independent of checkpoint selection.
    let train_scored =
        score_pairs(model, &params, store, manifest, &train_pairs, cfg.batch_size)?;
    let train_report = compute_metrics(&train_scored, protocol.threshold);
    let final_train_accuracy = train_report.accuracy.unwrap_or(0.0);

    std::fs::write(
        fold_dir.join("test_predictions.csv"),
        crate::stats::predictions_csv(&test_records),
    )?;

    Ok(FoldOutcome::Complete(Box::new(FoldArtifacts {
        fold,
        best_epoch,
        best_val_balanced_accuracy: best_ba,
        final_train_accuracy,
        curves,
        checkpoint_path,
        meta_path,
        test_metrics,
        test_records,
        warnings,
    })))
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

/// Sample mean and (n-1) standard deviation; std is 0 for fewer than two
/// values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-fold entry of a cross-validation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Process exit code the fold's error maps to, for callers that must
    /// propagate the failure class (only on `status == "failed"`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_exit_code: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_train_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

/// Aggregated metric across succeeded folds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean: f64,
    /// Sample standard deviation (n-1).
    pub std: f64,
    pub per_fold: Vec<f64>,
}

/// Full cross-validation result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvReport {
    pub variant: String,
    pub config_hash: String,
    pub folds: Vec<FoldSummary>,
    /// metric name -> aggregate over folds where the metric was defined.
    pub aggregates: BTreeMap<String, MetricAggregate>,
    pub warnings: Vec<String>,
}

impl CvReport {
    pub fn failed_folds(&self) -> Vec<usize> {
        self.folds.iter().filter(|f| f.status != "ok").map(|f| f.fold).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("serializing CV report: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Trains every fold of a patient-stratified split and aggregates held-out
/// metrics. Fold failures are recorded in the report instead of aborting the
/// remaining folds; the report is written to `out_dir/cv_report.json`.
pub fn cross_validate(
    model: &Model,
    manifest: &Manifest,
    store: &ImageStore,
    cfg: &TrainConfig,
    protocol: &EvalProtocol,
    out_dir: &Path,
    resume: bool,
) -> Result<(CvReport, Vec<FoldArtifacts>)> {
    cfg.validate()?;
    let plan = stratified_kfold(&manifest.patients(), cfg.fold_count, cfg.seed)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("split_plan.json"),
        serde_json::to_string_pretty(&plan)
            .map_err(|e| Error::format(format!("serializing split plan: {e}")))?,
    )?;

    let mut folds = Vec::new();
    let mut artifacts = Vec::new();
    let mut warnings = Vec::new();
    let mut per_metric: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for fold in 0..cfg.fold_count {
        // When resuming, folds that never wrote a snapshot start fresh.
        let fold_resume = resume && out_dir.join(format!("fold{fold}/state.json")).exists();
        match train_fold(model, manifest, store, &plan, fold, cfg, protocol, out_dir, fold_resume)
        {
            Ok(FoldOutcome::Complete(fa)) => {
                warnings.extend(fa.warnings.iter().cloned());
                let m = &fa.test_metrics;
                for (key, value) in [
                    ("balanced_accuracy", m.balanced_accuracy),
                    ("sensitivity", m.sensitivity),
                    ("specificity", m.specificity),
                    ("accuracy", m.accuracy),
                ] {
                    if let Some(v) = value {
                        per_metric.entry(key).or_default().push(v);
                    }
                }
                per_metric.entry("train_accuracy").or_default().push(fa.final_train_accuracy);
                folds.push(FoldSummary {
                    fold,
                    status: "ok".into(),
                    message: None,
                    error_exit_code: None,
                    best_epoch: Some(fa.best_epoch),
                    final_train_accuracy: Some(fa.final_train_accuracy),
                    metrics: Some(fa.test_metrics.clone()),
                });
                artifacts.push(*fa);
            }
            Ok(FoldOutcome::Paused(p)) => {
                folds.push(FoldSummary {
                    fold,
                    status: "paused".into(),
                    message: Some(format!(
                        "paused after {} epochs; resume to finish",
                        p.completed_epochs
                    )),
                    error_exit_code: None,
                    best_epoch: None,
                    final_train_accuracy: None,
                    metrics: None,
                });
            }
            Err(e) => {
                folds.push(FoldSummary {
                    fold,
                    status: "failed".into(),
                    message: Some(e.to_string()),
                    error_exit_code: Some(e.exit_code()),
                    best_epoch: None,
                    final_train_accuracy: None,
                    metrics: None,
                });
            }
        }
    }
    let mut aggregates = BTreeMap::new();
    for (key, values) in per_metric {
        let (mean, std) = mean_std(&values);
        aggregates.insert(key.to_string(), MetricAggregate { mean, std, per_fold: values });
    }
    let report = CvReport {
        variant: model.cfg.variant.as_str().to_string(),
        config_hash: config_fingerprint(&model.cfg, cfg),
        folds,
        aggregates,
        warnings,
    };
    report.save(&out_dir.join("cv_report.json"))?;
    Ok((report, artifacts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth, Normalization};
    use crate::model::{Variant, ModelConfig};
    use crate::swin::SwinConfig;

    /// Smallest viable encoder: 32-px input, single-token windows, 8 base
    /// channels. Only for plumbing tests; learns nothing interesting.
    fn micro_world(dir: &Path) -> (Model, Manifest, ImageStore) {
        let swin = SwinConfig {
            image_size: 32,
            patch_size: 4,
            window_size: 1,
            embed_dim: 8,
            depths: [1, 1, 1, 1],
            num_heads: [1, 1, 1, 1],
            ..SwinConfig::default()
        };
        let model = Model::new(ModelConfig::new(swin, Variant::Ssdca)).unwrap();
        let spec = synth::SynthSpec { patients: 6, image_px: 32, ..synth::SynthSpec::default() };
        let (manifest, _) = synth::generate(&spec, 11, dir).unwrap();
        let store =
            ImageStore::new(&manifest, model.cfg.encoder.image_size, Normalization::default());
        (model, manifest, store)
    }

    fn micro_cfg() -> TrainConfig {
        TrainConfig {
            total_epochs: 6,
            warmup_epochs: 2,
            batch_size: 4,
            fold_count: 2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn paused_and_resumed_fold_reproduces_the_uninterrupted_run() {
        let data = tempfile::tempdir().unwrap();
        let (model, manifest, store) = micro_world(data.path());
        let plan = stratified_kfold(&manifest.patients(), 2, 5).unwrap();
        let protocol = EvalProtocol::default();

        let out_a = tempfile::tempdir().unwrap();
        let cfg = micro_cfg();
        let full = train_fold(
            &model, &manifest, &store, &plan, 0, &cfg, &protocol, out_a.path(), false,
        )
        .unwrap()
        .into_complete()
        .unwrap();

        let out_b = tempfile::tempdir().unwrap();
        let mut paused_cfg = cfg.clone();
        paused_cfg.stop_after_epoch = Some(3);
        let paused = train_fold(
            &model, &manifest, &store, &plan, 0, &paused_cfg, &protocol, out_b.path(), false,
        )
        .unwrap();
        let FoldOutcome::Paused(p) = paused else { panic!("expected a paused fold") };
        assert_eq!(p.completed_epochs, 3);
        assert!(p.state_meta_path.exists() && p.state_records_path.exists());

        let resumed = train_fold(
            &model, &manifest, &store, &plan, 0, &cfg, &protocol, out_b.path(), true,
        )
        .unwrap()
        .into_complete()
        .unwrap();

        assert_eq!(full.curves, resumed.curves, "curves must match point for point");
        assert_eq!(full.best_epoch, resumed.best_epoch);
        assert_eq!(full.best_val_balanced_accuracy, resumed.best_val_balanced_accuracy);
        assert_eq!(full.final_train_accuracy, resumed.final_train_accuracy);
        assert_eq!(full.test_metrics, resumed.test_metrics);
        let bytes_a = std::fs::read(&full.checkpoint_path).unwrap();
        let bytes_b = std::fs::read(&resumed.checkpoint_path).unwrap();
        assert_eq!(bytes_a, bytes_b, "best checkpoints must be byte-identical");
        let curves_a = std::fs::read(out_a.path().join("fold0/curves.csv")).unwrap();
        let curves_b = std::fs::read(out_b.path().join("fold0/curves.csv")).unwrap();
        assert_eq!(curves_a, curves_b, "curve CSVs must be byte-identical");
    }

    #[test]
    fn resume_rejects_mismatched_config_and_missing_state() {
        let data = tempfile::tempdir().unwrap();
        let (model, manifest, store) = micro_world(data.path());
        let plan = stratified_kfold(&manifest.patients(), 2, 5).unwrap();
        let protocol = EvalProtocol::default();
        let out = tempfile::tempdir().unwrap();

        let missing = train_fold(
            &model, &manifest, &store, &plan, 0, &micro_cfg(), &protocol, out.path(), true,
        )
        .unwrap_err();
        assert_eq!(missing.exit_code(), 2, "{missing}");

        let mut paused_cfg = micro_cfg();
        paused_cfg.stop_after_epoch = Some(1);
        train_fold(&model, &manifest, &store, &plan, 0, &paused_cfg, &protocol, out.path(), false)
            .unwrap();

        let mut other = micro_cfg();
        other.learning_rate = 1e-4;
        let err = train_fold(
            &model, &manifest, &store, &plan, 0, &other, &protocol, out.path(), true,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
        assert!(err.to_string().contains("config"), "{err}");
    }

    #[test]
    fn schedule_hits_documented_values() {
        let cfg = TrainConfig::default();
        assert!((lr_schedule(&cfg, 0).unwrap() - 2e-5).abs() < 1e-18);
        assert!((lr_schedule(&cfg, 10).unwrap() - 2e-4).abs() < 1e-18);
        assert!((lr_schedule(&cfg, 29).unwrap() - 1e-5).abs() < 1e-18);
        assert!(lr_schedule(&cfg, 30).is_err());
    }

    #[test]
    fn schedule_is_piecewise_linear_continuous_with_exact_peak() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> =
            (0..cfg.total_epochs).map(|e| lr_schedule(&cfg, e).unwrap()).collect();
        let peak = lrs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(peak, 2e-4, "peak is exactly the configured rate");
        // Warmup ramp has constant increments; decay has constant decrements.
        for w in lrs[..cfg.warmup_epochs].windows(2) {
            assert!((w[1] - w[0] - 2e-5).abs() < 1e-18);
        }
        for w in lrs[cfg.warmup_epochs..].windows(2) {
            assert!((w[1] - w[0] + 1e-5).abs() < 1e-18);
        }
        // Continuity at the junction: epoch 9 (last warmup) == epoch 10 (peak).
        assert!((lrs[9] - lrs[10]).abs() < 1e-18);

        let hold = TrainConfig { constant_after_warmup: true, ..TrainConfig::default() };
        for e in hold.warmup_epochs..hold.total_epochs {
            assert_eq!(lr_schedule(&hold, e).unwrap(), 2e-4);
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        // theta=0, g=1, lr=0.1 -> bias-corrected m_hat=1, v_hat=1, theta=-0.1.
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("w", vec![0.0], vec![1]);
        let mut adam = AdamState::new(0.9, 0.999, 1e-8);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        adam.step(&mut params, &grads, 0.1, "").unwrap();
        let w = params.get("w").unwrap().values[0];
        assert!((w + 0.1).abs() < 1e-8, "first Adam step should land at -0.1, got {w}");
    }

    #[test]
    fn adam_zero_gradient_is_identity_and_moments_decay() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("w", vec![0.5, -0.25], vec![2]);
        let mut adam = AdamState::new(0.9, 0.999, 1e-8);
        let mut zero = BTreeMap::new();
        zero.insert("w".to_string(), vec![0.0, 0.0]);
        for _ in 0..5 {
            adam.step(&mut params, &zero, 0.1, "").unwrap();
        }
        assert_eq!(params.get("w").unwrap().values.as_slice(), &[0.5, -0.25]);

        // Warm start with g=1, then a zero gradient shrinks m by beta1.
        let mut one = BTreeMap::new();
        one.insert("w".to_string(), vec![1.0, 1.0]);
        adam.step(&mut params, &one, 0.1, "").unwrap();
        let m_before = adam.first_moment("w").unwrap()[0];
        adam.step(&mut params, &zero, 0.1, "").unwrap();
        let m_after = adam.first_moment("w").unwrap()[0];
        assert!((m_after - 0.9 * m_before).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_scalar_oracle_on_scripted_sequences() {
        let mut rng = crate::seeded_rng(123, "test.adam.oracle");
        for script in 0..20 {
            let (b1, b2, eps) = (0.9, 0.999, 1e-8);
            let steps = 1 + (script % 7);
            let mut params: ParamSet<f64> = ParamSet::new();
            let theta0: f64 = rng.gen_range(-1.0..1.0);
            params.insert("w", vec![theta0], vec![1]);
            let mut adam = AdamState::new(b1, b2, eps);

            // Independent hand-rolled oracle.
            let (mut theta, mut m, mut v) = (theta0, 0.0f64, 0.0f64);
            for t in 1..=steps {
                let g: f64 = rng.gen_range(-2.0..2.0);
                let lr: f64 = rng.gen_range(1e-4..1e-1);
                let mut grads = BTreeMap::new();
                grads.insert("w".to_string(), vec![g]);
                adam.step(&mut params, &grads, lr, "").unwrap();

                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let m_hat = m / (1.0 - b1.powi(t as i32));
                let v_hat = v / (1.0 - b2.powi(t as i32));
                theta -= lr * m_hat / (v_hat.sqrt() + eps);

                let got = params.get("w").unwrap().values[0];
                assert!(
                    (got - theta).abs() < 1e-12,
                    "script {script} step {t}: {got} vs oracle {theta}"
                );
            }
        }
    }

    #[test]
    fn adam_aborts_on_nan_gradient_naming_tensor() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("enc.s1.b00.attn.wq", vec![0.0], vec![1]);
        let mut adam = AdamState::new(0.9, 0.999, 1e-8);
        let mut grads = BTreeMap::new();
        grads.insert("enc.s1.b00.attn.wq".to_string(), vec![f64::NAN]);
        let err = adam.step(&mut params, &grads, 0.1, " (fold 3, epoch 1, step 2)").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(msg.contains("enc.s1.b00.attn.wq"), "{msg}");
        assert!(msg.contains("fold 3"), "{msg}");
    }

    #[test]
    fn mean_std_matches_hand_computed_five_value_case() {
        let values = [80.0, 82.0, 78.0, 84.0, 76.0];
        let (mean, std) = mean_std(&values);
        assert!((mean - 80.0).abs() < 1e-12);
        // Sample variance: (0+4+4+16+16)/4 = 10.
        assert!((std - 10.0f64.sqrt()).abs() < 1e-12);
        let (m1, s1) = mean_std(&[42.0]);
        assert_eq!((m1, s1), (42.0, 0.0));
        let (same, zero) = mean_std(&[7.0; 5]);
        assert_eq!((same, zero), (7.0, 0.0));
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let bad_warmup = TrainConfig { warmup_epochs: 30, ..TrainConfig::default() };
        assert_eq!(bad_warmup.validate().unwrap_err().exit_code(), 2);
        let bad_batch = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad_batch.validate().is_err());
        let bad_lr = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(bad_lr.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());

        let bad_topk = EvalProtocol { topk: 0, ..EvalProtocol::default() };
        assert!(bad_topk.validate().is_err());
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let model_cfg = ModelConfig::new(
            crate::swin::SwinConfig::toy(),
            crate::model::Variant::Ssdca,
        );
        let train_cfg = TrainConfig::default();
        let a = config_fingerprint(&model_cfg, &train_cfg);
        let b = config_fingerprint(&model_cfg, &train_cfg);
        assert_eq!(a, b);
        let other = TrainConfig { seed: 1, ..TrainConfig::default() };
        assert_ne!(a, config_fingerprint(&model_cfg, &other));
    }

    #[test]
    fn curves_csv_roundtrip_format() {
        let points = vec![
            CurvePoint { epoch: 0, split: "train".into(), metric: "loss".into(), value: 0.7 },
            CurvePoint { epoch: 0, split: "val".into(), metric: "balanced_accuracy".into(), value: 50.0 },
        ];
        let csv = curves_csv(&points);
        assert!(csv.starts_with("epoch,split,metric,value\n"));
        assert!(csv.contains("0,train,loss,0.700000"));
        assert!(csv.contains("0,val,balanced_accuracy,50.000000"));
    }
}
