//! Dataset plumbing: study manifests, longitudinal pair construction,
//! patient-stratified folds, balanced sampling, augmentation, and image IO.
//!
//! A dataset lives in a directory containing a `manifest.jsonl` file plus the
//! image files it references (paths are relative to the manifest's directory).
//! The manifest starts with the header line `ssdca-manifest v1`; every
//! following non-empty line is one JSON [`StudyRecord`].

pub mod synth;

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// First line of every manifest file.
pub const MANIFEST_HEADER: &str = "ssdca-manifest v1";

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// Patient-level outcome label shared by all records of one patient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    /// Clinical complete response: negative class, label 0.
    #[serde(rename = "cCR")]
    CCr,
    /// Local regrowth: positive class, label 1.
    #[serde(rename = "LR")]
    Lr,
}

impl Outcome {
    /// Binary training target (LR is the positive class).
    pub fn label(self) -> f64 {
        match self {
            Outcome::CCr => 0.0,
            Outcome::Lr => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::CCr => "cCR",
            Outcome::Lr => "LR",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Image-quality artifact tags. One image may carry several.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Artifact {
    #[serde(rename = "blood")]
    Blood,
    #[serde(rename = "stool")]
    Stool,
    /// Too little gas: under-insufflated lumen occludes the field of view.
    #[serde(rename = "TLG")]
    Tlg,
    /// Poor quality: blur / color degradation.
    #[serde(rename = "PQ")]
    Pq,
}

impl Artifact {
    pub const ALL: [Artifact; 4] = [Artifact::Blood, Artifact::Stool, Artifact::Tlg, Artifact::Pq];

    pub fn as_str(self) -> &'static str {
        match self {
            Artifact::Blood => "blood",
            Artifact::Stool => "stool",
            Artifact::Tlg => "TLG",
            Artifact::Pq => "PQ",
        }
    }

    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "blood" => Ok(Artifact::Blood),
            "stool" => Ok(Artifact::Stool),
            "TLG" => Ok(Artifact::Tlg),
            "PQ" => Ok(Artifact::Pq),
            other => Err(Error::format(format!(
                "unknown artifact tag `{other}` (expected blood, stool, TLG, or PQ)"
            ))),
        }
    }
}

impl fmt::Display for Artifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One endoscopic image acquisition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub patient_id: String,
    /// Image path relative to the manifest directory.
    pub image_path: String,
    pub acquisition_date: NaiveDate,
    /// 0 = restaging visit; 1.. = follow-up visits in temporal order.
    pub timepoint_index: u32,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub artifacts: BTreeSet<Artifact>,
    pub outcome: Outcome,
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// A validated collection of study records rooted at a dataset directory.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<StudyRecord>,
    /// Directory that image paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    /// Builds a manifest from in-memory records, running full validation.
    pub fn new(records: Vec<StudyRecord>, root: PathBuf) -> Result<Self> {
        validate_records(&records)?;
        Ok(Manifest { records, root })
    }

    /// Reads and validates `manifest.jsonl`-style content from `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::format(format!("{}: empty manifest", path.display())))?;
        if header.trim() != MANIFEST_HEADER {
            return Err(Error::format(format!(
                "{}: expected header `{}`, found `{}`",
                path.display(),
                MANIFEST_HEADER,
                header.trim()
            )));
        }
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: StudyRecord = serde_json::from_str(&line).map_err(|e| {
                Error::format(format!("{}: line {}: {}", path.display(), lineno + 2, e))
            })?;
            records.push(record);
        }
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Manifest::new(records, root)
    }

    /// Writes the manifest in the canonical line-oriented format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{MANIFEST_HEADER}")?;
        for record in &self.records {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::format(format!("serializing record: {e}")))?;
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Absolute path of a record's image file.
    pub fn image_path(&self, record: &StudyRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    /// Patient id -> outcome, sorted by id.
    pub fn patients(&self) -> BTreeMap<String, Outcome> {
        let mut map = BTreeMap::new();
        for r in &self.records {
            map.insert(r.patient_id.clone(), r.outcome);
        }
        map
    }

    /// Sub-manifest containing only the given patients.
    pub fn subset(&self, patients: &BTreeSet<String>) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| patients.contains(&r.patient_id))
                .cloned()
                .collect(),
            root: self.root.clone(),
        }
    }
}

/// Checks per-patient outcome consistency and temporal ordering.
///
/// Rules: all records of a patient share one outcome; all records at one
/// timepoint index share one acquisition date; dates strictly increase with
/// the timepoint index.
pub fn validate_records(records: &[StudyRecord]) -> Result<()> {
    let mut outcomes: BTreeMap<&str, Outcome> = BTreeMap::new();
    let mut dates: BTreeMap<(&str, u32), NaiveDate> = BTreeMap::new();
    for r in records {
        if let Some(prev) = outcomes.insert(&r.patient_id, r.outcome) {
            if prev != r.outcome {
                return Err(Error::format(format!(
                    "patient {} has conflicting outcomes {} and {}",
                    r.patient_id, prev, r.outcome
                )));
            }
        }
        if let Some(prev) = dates.insert((&r.patient_id, r.timepoint_index), r.acquisition_date) {
            if prev != r.acquisition_date {
                return Err(Error::format(format!(
                    "patient {} timepoint {} has two acquisition dates ({} and {})",
                    r.patient_id, r.timepoint_index, prev, r.acquisition_date
                )));
            }
        }
    }
    let mut by_patient: BTreeMap<&str, Vec<(u32, NaiveDate)>> = BTreeMap::new();
    for ((pid, tp), date) in &dates {
        by_patient.entry(pid).or_default().push((*tp, *date));
    }
    for (pid, mut tps) in by_patient {
        tps.sort();
        for pair in tps.windows(2) {
            if pair[1].1 <= pair[0].1 {
                return Err(Error::format(format!(
                    "patient {pid}: timepoint {} ({}) is not after timepoint {} ({})",
                    pair[1].0, pair[1].1, pair[0].0, pair[0].1
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pair construction
// ---------------------------------------------------------------------------

/// One (pre, post) image pair; indices refer to `Manifest::records`.
#[derive(Clone, Debug, PartialEq)]
pub struct LongitudinalPair {
    pub pre: usize,
    pub post: usize,
    /// 0.0 = cCR, 1.0 = LR.
    pub label: f64,
    pub patient_id: String,
    /// Pairs sharing this key come from one patient's same post-image day and
    /// are aggregated jointly at evaluation time.
    pub same_day_group: String,
}

/// Which pairing rule to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairMode {
    /// Every temporally ordered timepoint pair, image cross-product.
    Train,
    /// Restaging images (timepoint 0) crossed with the latest follow-up.
    Test,
}

/// Builds image pairs for a manifest; returns the pairs plus human-readable
/// warnings for patients that had to be skipped.
pub fn build_pairs(manifest: &Manifest, mode: PairMode) -> (Vec<LongitudinalPair>, Vec<String>) {
    let mut by_patient: BTreeMap<&str, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_patient
            .entry(&r.patient_id)
            .or_default()
            .entry(r.timepoint_index)
            .or_default()
            .push(i);
    }
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for (pid, tps) in by_patient {
        if tps.len() < 2 {
            warnings.push(format!(
                "patient {pid}: fewer than two timepoints, no pairs formed"
            ));
            continue;
        }
        let timepoints: Vec<u32> = tps.keys().copied().collect();
        let emit = |pre_tp: u32, post_tp: u32, pairs: &mut Vec<LongitudinalPair>| {
            for &pre in &tps[&pre_tp] {
                for &post in &tps[&post_tp] {
                    let post_rec = &manifest.records[post];
                    pairs.push(LongitudinalPair {
                        pre,
                        post,
                        label: post_rec.outcome.label(),
                        patient_id: pid.to_string(),
                        same_day_group: format!("{pid}|{}", post_rec.acquisition_date),
                    });
                }
            }
        };
        match mode {
            PairMode::Train => {
                for (a, &pre_tp) in timepoints.iter().enumerate() {
                    for &post_tp in &timepoints[a + 1..] {
                        emit(pre_tp, post_tp, &mut pairs);
                    }
                }
            }
            PairMode::Test => {
                if !tps.contains_key(&0) {
                    warnings.push(format!(
                        "patient {pid}: no restaging timepoint (index 0), skipped in test pairing"
                    ));
                    continue;
                }
                let last = *timepoints.last().expect("nonempty");
                emit(0, last, &mut pairs);
            }
        }
    }
    (pairs, warnings)
}

// ---------------------------------------------------------------------------
// Patient-stratified k-fold split
// ---------------------------------------------------------------------------

/// Patient ids held out by each fold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<BTreeSet<String>>,
}

impl SplitPlan {
    /// (training patients, held-out patients) for fold `i`.
    pub fn split(&self, i: usize) -> (BTreeSet<String>, BTreeSet<String>) {
        let heldout = self.folds[i].clone();
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        (train, heldout)
    }
}

/// Splits patients into `k` folds preserving the class mix.
///
/// Within each class, patients are shuffled deterministically by `seed` and
/// dealt round-robin, so per-class fold counts differ by at most one. Errors
/// if either class has fewer than `k` patients.
pub fn stratified_kfold(
    patients: &BTreeMap<String, Outcome>,
    k: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::config(format!("fold count must be at least 2, got {k}")));
    }
    let mut folds: Vec<BTreeSet<String>> = vec![BTreeSet::new(); k];
    for outcome in [Outcome::CCr, Outcome::Lr] {
        let mut ids: Vec<&String> = patients
            .iter()
            .filter(|(_, o)| **o == outcome)
            .map(|(id, _)| id)
            .collect();
        if ids.len() < k {
            return Err(Error::config(format!(
                "class {} has {} patients but {} folds were requested",
                outcome,
                ids.len(),
                k
            )));
        }
        let mut rng = crate::seeded_rng(seed, &format!("kfold.{outcome}"));
        // Fisher-Yates over the id slice keeps the draw order independent of map internals.
        for i in (1..ids.len()).rev() {
            let j = rng.gen_range(0..=i);
            ids.swap(i, j);
        }
        for (i, id) in ids.into_iter().enumerate() {
            folds[i % k].insert(id.clone());
        }
    }
    Ok(SplitPlan { folds })
}

// ---------------------------------------------------------------------------
// Balanced sampling
// ---------------------------------------------------------------------------

/// Samples pair indices with equal class probability (with replacement).
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    negatives: Vec<usize>,
    positives: Vec<usize>,
}

impl BalancedSampler {
    pub fn new(pairs: &[LongitudinalPair]) -> Result<Self> {
        let mut negatives = Vec::new();
        let mut positives = Vec::new();
        for (i, p) in pairs.iter().enumerate() {
            if p.label > 0.5 {
                positives.push(i);
            } else {
                negatives.push(i);
            }
        }
        if negatives.is_empty() || positives.is_empty() {
            return Err(Error::config(format!(
                "balanced sampling needs both classes; got {} cCR and {} LR pairs",
                negatives.len(),
                positives.len()
            )));
        }
        Ok(BalancedSampler { negatives, positives })
    }

    /// Draws one pair index: a fair coin picks the class, then a uniform draw
    /// picks the pair within it.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let class = if rng.gen_bool(0.5) { &self.positives } else { &self.negatives };
        class[rng.gen_range(0..class.len())]
    }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// A square-image dihedral augmentation: quarter turns then optional flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    /// Clockwise quarter turns, 0..=3, applied first.
    pub quarter_turns: u8,
    /// Horizontal mirror (left-right), applied after rotation.
    pub flip_h: bool,
    /// Vertical mirror (top-bottom), applied last.
    pub flip_v: bool,
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation { quarter_turns: 0, flip_h: false, flip_v: false }
    }

    /// Uniform draw over rotations and flips.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Augmentation {
            quarter_turns: rng.gen_range(0..4u8),
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
        }
    }

    /// Source pixel (row, col) that lands at destination (row, col).
    fn source_of(&self, mut r: usize, mut c: usize, side: usize) -> (usize, usize) {
        // Invert the pipeline back-to-front: undo flip_v, flip_h, then rotation.
        if self.flip_v {
            r = side - 1 - r;
        }
        if self.flip_h {
            c = side - 1 - c;
        }
        for _ in 0..(self.quarter_turns % 4) {
            // One clockwise turn sends source (r, c) to (c, side-1-r); its
            // inverse sends destination (r, c) back to (side-1-c, r).
            let (nr, nc) = (side - 1 - c, r);
            r = nr;
            c = nc;
        }
        (r, c)
    }

    /// Applies the transform to an interleaved `[side*side*channels]` buffer.
    pub fn apply(&self, pixels: &[f32], side: usize, channels: usize) -> Vec<f32> {
        assert_eq!(pixels.len(), side * side * channels, "pixel buffer size mismatch");
        if *self == Augmentation::identity() {
            return pixels.to_vec();
        }
        let mut out = vec![0f32; pixels.len()];
        for r in 0..side {
            for c in 0..side {
                let (sr, sc) = self.source_of(r, c, side);
                let dst = (r * side + c) * channels;
                let src = (sr * side + sc) * channels;
                out[dst..dst + channels].copy_from_slice(&pixels[src..src + channels]);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Image loading
// ---------------------------------------------------------------------------

/// Per-channel normalization applied after scaling pixels to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: 0.5, std: 0.25 }
    }
}

/// Decodes, resizes, normalizes, and caches dataset images.
///
/// `get` returns an interleaved RGB buffer of `side*side*3` normalized f32
/// values; results are cached per record path.
pub struct ImageStore {
    root: PathBuf,
    side: usize,
    norm: Normalization,
    cache: RefCell<HashMap<String, Arc<Vec<f32>>>>,
}

impl ImageStore {
    pub fn new(manifest: &Manifest, side: usize, norm: Normalization) -> Self {
        ImageStore {
            root: manifest.root.clone(),
            side,
            norm,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn get(&self, record: &StudyRecord) -> Result<Arc<Vec<f32>>> {
        if let Some(hit) = self.cache.borrow().get(&record.image_path) {
            return Ok(Arc::clone(hit));
        }
        let path = self.root.join(&record.image_path);
        let img = image::open(&path)
            .map_err(|e| Error::format(format!("{}: {}", path.display(), e)))?
            .into_rgb8();
        let resized = image::imageops::resize(
            &img,
            self.side as u32,
            self.side as u32,
            image::imageops::FilterType::Triangle,
        );
        let mut buf = Vec::with_capacity(self.side * self.side * 3);
        for px in resized.pixels() {
            for &v in &px.0 {
                let unit = v as f64 / 255.0;
                buf.push(((unit - self.norm.mean) / self.norm.std) as f32);
            }
        }
        let arc = Arc::new(buf);
        self.cache.borrow_mut().insert(record.image_path.clone(), Arc::clone(&arc));
        Ok(arc)
    }
}
