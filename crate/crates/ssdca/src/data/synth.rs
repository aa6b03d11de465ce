//! Synthetic longitudinal endoscopy-like dataset generator.
//!
//! Every patient carries a pale, flat scar-like signature at the treated
//! site from the restaging visit onward, so a restaging image alone does not
//! reveal the outcome. Regrowth (LR) patients additionally develop a darker
//! textured lesion at that site which appears at the first follow-up and
//! grows with every later timepoint; complete-response (cCR) patients keep
//! the unchanged flat scar. Telling the classes apart therefore requires
//! either a follow-up image or a longitudinal comparison, which mirrors the
//! clinical task. Optional artifact overlays (blood blobs, stool occlusions,
//! speckle, blur) are applied per image and recorded as manifest tags.
//! Everything is a pure function of `(spec, seed)`.
//!
//! Besides `manifest.jsonl` and the PNG files, the generator writes a
//! `masks.json` sidecar mapping each image path to its planted-signature disk
//! (fractional center and radius), which interpretability tests use as a
//! localization ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_pairs, Artifact, Manifest, Outcome, PairMode, StudyRecord, MANIFEST_HEADER,
};
use crate::error::Error;
use crate::{seeded_rng, Result};

/// Independent per-image probabilities for each artifact tag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactProbs {
    pub blood: f64,
    pub stool: f64,
    pub tlg: f64,
    pub pq: f64,
}

impl Default for ArtifactProbs {
    fn default() -> Self {
        ArtifactProbs { blood: 0.0, stool: 0.0, tlg: 0.0, pq: 0.0 }
    }
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub patients: usize,
    /// Visits per patient: index 0 is restaging, the rest are follow-ups.
    pub timepoints: usize,
    /// Fraction of patients with the LR outcome.
    pub class_ratio: f64,
    pub artifact_probs: ArtifactProbs,
    /// Chance of an additional same-day image at each timepoint (drawn
    /// repeatedly, at most two extras per visit).
    pub extra_image_prob: f64,
    /// Side length of the square PNGs.
    pub image_px: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            patients: 32,
            timepoints: 3,
            class_ratio: 0.5,
            artifact_probs: ArtifactProbs::default(),
            extra_image_prob: 0.0,
            image_px: 96,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patients < 2 {
            return Err(Error::config(format!(
                "need at least 2 patients, got {}",
                self.patients
            )));
        }
        if self.timepoints < 2 {
            return Err(Error::config(format!(
                "need at least 2 timepoints to form pairs, got {}",
                self.timepoints
            )));
        }
        if !(self.class_ratio > 0.0 && self.class_ratio < 1.0) {
            return Err(Error::config(format!(
                "class ratio must lie strictly between 0 and 1, got {}",
                self.class_ratio
            )));
        }
        for (name, p) in [
            ("blood", self.artifact_probs.blood),
            ("stool", self.artifact_probs.stool),
            ("tlg", self.artifact_probs.tlg),
            ("pq", self.artifact_probs.pq),
            ("extra_image_prob", self.extra_image_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!(
                    "probability `{name}` must lie in [0, 1], got {p}"
                )));
            }
        }
        if self.image_px < 32 {
            return Err(Error::config(format!(
                "image side must be at least 32 px, got {}",
                self.image_px
            )));
        }
        let lr = self.lr_patients();
        if lr == 0 || lr == self.patients {
            return Err(Error::config(format!(
                "class ratio {} with {} patients leaves one class empty",
                self.class_ratio, self.patients
            )));
        }
        Ok(())
    }

    pub fn lr_patients(&self) -> usize {
        (self.patients as f64 * self.class_ratio).round() as usize
    }
}

/// What was planted in an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignatureKind {
    Lesion,
    Scar,
}

/// Planted-signature disk for one image, in fractional image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedMask {
    pub kind: SignatureKind,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl PlantedMask {
    /// True if the pixel at fractional coordinates (x, y) lies in the disk.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        dx * dx + dy * dy <= self.radius * self.radius
    }

    /// Rasterizes the disk onto a `side x side` boolean grid.
    pub fn rasterize(&self, side: usize) -> Vec<bool> {
        let mut out = vec![false; side * side];
        for r in 0..side {
            for c in 0..side {
                let y = (r as f64 + 0.5) / side as f64;
                let x = (c as f64 + 0.5) / side as f64;
                out[r * side + c] = self.contains(x, y);
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    version: u32,
    images: BTreeMap<String, PlantedMask>,
}

/// Loads the `masks.json` sidecar written by [`generate`].
pub fn load_masks(path: &Path) -> Result<BTreeMap<String, PlantedMask>> {
    let text = std::fs::read_to_string(path)?;
    let file: MaskFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {}", path.display(), e)))?;
    if file.version != 1 {
        return Err(Error::format(format!(
            "{}: unsupported masks version {}",
            path.display(),
            file.version
        )));
    }
    Ok(file.images)
}

/// Counts reported after generation.
#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub patients: usize,
    pub lr_patients: usize,
    pub ccr_patients: usize,
    pub images: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub artifact_counts: BTreeMap<String, usize>,
}

/// Generates the dataset under `out_dir` and returns the in-memory manifest
/// plus summary counts. Writes `manifest.jsonl`, `masks.json`, and
/// `images/*.png`.
pub fn generate(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<(Manifest, SynthSummary)> {
    spec.validate()?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;

    // Outcome assignment: fixed counts, order shuffled by the master stream.
    let mut outcomes = vec![Outcome::Lr; spec.lr_patients()];
    outcomes.resize(spec.patients, Outcome::CCr);
    let mut master = seeded_rng(seed, "synth.outcomes");
    for i in (1..outcomes.len()).rev() {
        let j = master.gen_range(0..=i);
        outcomes.swap(i, j);
    }

    let mut records = Vec::new();
    let mut masks = BTreeMap::new();
    let mut artifact_counts: BTreeMap<String, usize> = BTreeMap::new();
    let base_date = NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date");

    for (pidx, outcome) in outcomes.iter().enumerate() {
        let pid = format!("p{pidx:03}");
        let mut prng = seeded_rng(seed, &format!("synth.{pid}"));
        let anatomy = PatientAnatomy::sample(&mut prng, *outcome);
        let start = base_date + Duration::days((pidx % 11) as i64);

        for tp in 0..spec.timepoints {
            let date = start + Duration::days(56 * tp as i64);
            let mut images_at_tp = 1usize;
            // Extra same-day acquisitions, capped at three per visit.
            {
                let mut erng = seeded_rng(seed, &format!("synth.{pid}.t{tp}.extras"));
                while images_at_tp < 3 && erng.gen_bool(spec.extra_image_prob.min(1.0).max(0.0)) {
                    images_at_tp += 1;
                }
            }
            for k in 0..images_at_tp {
                let rel_path = format!("images/{pid}_t{tp}_i{k}.png");
                let mut irng = seeded_rng(seed, &format!("synth.{pid}.t{tp}.i{k}"));
                let (pixels, mask, tags) =
                    render_image(spec, &anatomy, tp, &mut irng);
                write_png(&out_dir.join(&rel_path), &pixels, spec.image_px)?;
                for t in &tags {
                    *artifact_counts.entry(t.as_str().to_string()).or_insert(0) += 1;
                }
                masks.insert(rel_path.clone(), mask);
                records.push(StudyRecord {
                    patient_id: pid.clone(),
                    image_path: rel_path,
                    acquisition_date: date,
                    timepoint_index: tp as u32,
                    artifacts: tags.into_iter().collect(),
                    outcome: *outcome,
                });
            }
        }
    }

    let manifest = Manifest::new(records, out_dir.to_path_buf())?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    let mask_file = MaskFile { version: 1, images: masks };
    std::fs::write(
        out_dir.join("masks.json"),
        serde_json::to_string_pretty(&mask_file)
            .map_err(|e| Error::format(format!("serializing masks: {e}")))?,
    )?;

    let (train_pairs, _) = build_pairs(&manifest, PairMode::Train);
    let (test_pairs, _) = build_pairs(&manifest, PairMode::Test);
    let summary = SynthSummary {
        patients: spec.patients,
        lr_patients: spec.lr_patients(),
        ccr_patients: spec.patients - spec.lr_patients(),
        images: manifest.records.len(),
        train_pairs: train_pairs.len(),
        test_pairs: test_pairs.len(),
        artifact_counts,
    };
    Ok((manifest, summary))
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Per-patient appearance parameters, fixed across that patient's images.
///
/// All fields are sampled with an identical draw order regardless of
/// outcome, so restaging images (where no lesion is rendered yet) are
/// identically distributed for both classes.
struct PatientAnatomy {
    outcome: Outcome,
    /// Base mucosa color (R, G, B in [0, 1]).
    base: [f64; 3],
    /// Treated-site (scar) disk center, fractional; kept inside one image
    /// quadrant so the signature stays compact and does not straddle the
    /// midlines.
    cx: f64,
    cy: f64,
    /// Scar disk radius (fractional) and blend strength; constant over time.
    scar_radius: f64,
    scar_alpha: f64,
    /// Lesion center offset from the scar center (regrowth arises at the
    /// treated site).
    lesion_dx: f64,
    lesion_dy: f64,
    /// Low-frequency shading field parameters (freq, phase per axis).
    shade: [f64; 4],
}

impl PatientAnatomy {
    fn sample<R: Rng>(rng: &mut R, outcome: Outcome) -> Self {
        let base = [
            0.76 + 0.08 * (rng.gen::<f64>() - 0.5),
            0.42 + 0.08 * (rng.gen::<f64>() - 0.5),
            0.40 + 0.08 * (rng.gen::<f64>() - 0.5),
        ];
        // Quadrant center (0.3 or 0.7 per axis) plus a small jitter.
        let pick = |rng: &mut R| -> f64 {
            let q = if rng.gen_bool(0.5) { 0.30 } else { 0.70 };
            q + 0.08 * (rng.gen::<f64>() - 0.5)
        };
        let cx = pick(rng);
        let cy = pick(rng);
        let scar_radius = 0.09 + 0.03 * rng.gen::<f64>();
        let scar_alpha = 0.50 + 0.10 * rng.gen::<f64>();
        let lesion_dx = 0.05 * (rng.gen::<f64>() - 0.5);
        let lesion_dy = 0.05 * (rng.gen::<f64>() - 0.5);
        let shade = [
            2.0 + 2.0 * rng.gen::<f64>(),
            2.0 + 2.0 * rng.gen::<f64>(),
            std::f64::consts::TAU * rng.gen::<f64>(),
            std::f64::consts::TAU * rng.gen::<f64>(),
        ];
        PatientAnatomy {
            outcome,
            base,
            cx,
            cy,
            scar_radius,
            scar_alpha,
            lesion_dx,
            lesion_dy,
            shade,
        }
    }

    /// Lesion disk radius (fractional) at a timepoint; zero means absent.
    /// The lesion first appears at the first follow-up and grows with every
    /// later visit, while cCR patients never develop one.
    fn lesion_radius(&self, tp: usize) -> f64 {
        match self.outcome {
            Outcome::Lr if tp >= 1 => (0.06 + 0.05 * tp as f64).min(0.18),
            _ => 0.0,
        }
    }

    /// Lesion blend strength at a timepoint.
    fn lesion_alpha(&self, tp: usize) -> f64 {
        match self.outcome {
            Outcome::Lr if tp >= 1 => (0.30 + 0.30 * tp as f64).min(0.92),
            _ => 0.0,
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders one image; returns interleaved RGB in [0, 1], the planted mask,
/// and the artifact tags applied.
fn render_image<R: Rng>(
    spec: &SynthSpec,
    anatomy: &PatientAnatomy,
    tp: usize,
    rng: &mut R,
) -> (Vec<f64>, PlantedMask, Vec<Artifact>) {
    let side = spec.image_px;
    let mut px = vec![0f64; side * side * 3];

    // Per-image global illumination wobble; pairwise comparison can cancel it.
    let illum = 1.0 + 0.16 * (rng.gen::<f64>() - 0.5);
    // Same-day repeat acquisitions shift the probe slightly.
    let jx = 0.04 * (rng.gen::<f64>() - 0.5);
    let jy = 0.04 * (rng.gen::<f64>() - 0.5);
    // Scar-like treated site: present in every image of every patient.
    let scar_cx = (anatomy.cx + jx).clamp(0.1, 0.9);
    let scar_cy = (anatomy.cy + jy).clamp(0.1, 0.9);
    const SCAR_COLOR: [f64; 3] = [0.88, 0.82, 0.78]; // pale flat scar
    // Regrowth lesion: absent at restaging, grows at follow-ups (LR only).
    let lesion_radius = anatomy.lesion_radius(tp);
    let lesion_alpha = anatomy.lesion_alpha(tp);
    let lesion_cx = (anatomy.cx + anatomy.lesion_dx + jx).clamp(0.1, 0.9);
    let lesion_cy = (anatomy.cy + anatomy.lesion_dy + jy).clamp(0.1, 0.9);
    const LESION_COLOR: [f64; 3] = [0.45, 0.10, 0.09]; // dark red lesion
    // The recorded mask is the class-discriminative signature: the lesion
    // once it exists, otherwise the scar disk.
    let mask = if lesion_radius > 0.0 {
        PlantedMask {
            kind: SignatureKind::Lesion,
            cx: lesion_cx,
            cy: lesion_cy,
            radius: lesion_radius,
        }
    } else {
        PlantedMask {
            kind: SignatureKind::Scar,
            cx: scar_cx,
            cy: scar_cy,
            radius: anatomy.scar_radius,
        }
    };
    let [fx, fy, phx, phy] = anatomy.shade;

    for r in 0..side {
        for c in 0..side {
            let y = (r as f64 + 0.5) / side as f64;
            let x = (c as f64 + 0.5) / side as f64;
            // Mucosa base with low-frequency shading and fine noise.
            let shade = 1.0
                + 0.05 * (fx * x * std::f64::consts::TAU + phx).sin()
                + 0.05 * (fy * y * std::f64::consts::TAU + phy).sin();
            let noise = 0.02 * (rng.gen::<f64>() - 0.5);
            // Radial vignette as in an endoscopic field of view.
            let (dx, dy) = (x - 0.5, y - 0.5);
            let vignette = 1.0 - 0.55 * ((dx * dx + dy * dy) / 0.5).min(1.0);
            let mut rgb = [0.0; 3];
            for ch in 0..3 {
                rgb[ch] = (anatomy.base[ch] * shade + noise) * vignette * illum;
            }
            // Flat scar composited first with a soft edge.
            let d_scar = ((x - scar_cx).powi(2) + (y - scar_cy).powi(2)).sqrt();
            let scar_edge =
                1.0 - smoothstep(anatomy.scar_radius * 0.7, anatomy.scar_radius, d_scar);
            if scar_edge > 0.0 {
                let a = anatomy.scar_alpha * scar_edge;
                for ch in 0..3 {
                    rgb[ch] = rgb[ch] * (1.0 - a) + SCAR_COLOR[ch] * a;
                }
            }
            // Textured lesion composited on top once it has appeared.
            if lesion_radius > 0.0 {
                let d = ((x - lesion_cx).powi(2) + (y - lesion_cy).powi(2)).sqrt();
                let edge = 1.0 - smoothstep(lesion_radius * 0.7, lesion_radius, d);
                if edge > 0.0 {
                    let texture = 0.22 * (rng.gen::<f64>() - 0.5);
                    let a = lesion_alpha * edge;
                    for ch in 0..3 {
                        rgb[ch] = rgb[ch] * (1.0 - a) + (LESION_COLOR[ch] + texture) * a;
                    }
                }
            }
            let base = (r * side + c) * 3;
            for ch in 0..3 {
                px[base + ch] = rgb[ch].clamp(0.0, 1.0);
            }
        }
    }

    // Artifact overlays, each drawn independently.
    let mut tags = Vec::new();
    if rng.gen_bool(spec.artifact_probs.blood) {
        let count = 2 + rng.gen_range(0..3);
        overlay_blobs(&mut px, side, rng, count, 0.03..0.08, [0.55, 0.05, 0.06], 0.85);
        tags.push(Artifact::Blood);
    }
    if rng.gen_bool(spec.artifact_probs.stool) {
        let count = 1 + rng.gen_range(0..2);
        overlay_blobs(&mut px, side, rng, count, 0.10..0.20, [0.52, 0.40, 0.16], 0.9);
        tags.push(Artifact::Stool);
    }
    if rng.gen_bool(spec.artifact_probs.tlg) {
        overlay_speckle(&mut px, rng);
        tags.push(Artifact::Tlg);
    }
    if rng.gen_bool(spec.artifact_probs.pq) {
        box_blur(&mut px, side, (side / 32).max(1));
        desaturate(&mut px, 0.55);
        tags.push(Artifact::Pq);
    }

    (px, mask, tags)
}

/// Paints `count` soft-edged colored disks at random positions.
fn overlay_blobs<R: Rng>(
    px: &mut [f64],
    side: usize,
    rng: &mut R,
    count: usize,
    radius_range: std::ops::Range<f64>,
    color: [f64; 3],
    alpha: f64,
) {
    for _ in 0..count {
        let cx = 0.1 + 0.8 * rng.gen::<f64>();
        let cy = 0.1 + 0.8 * rng.gen::<f64>();
        let radius = radius_range.start + (radius_range.end - radius_range.start) * rng.gen::<f64>();
        for r in 0..side {
            for c in 0..side {
                let y = (r as f64 + 0.5) / side as f64;
                let x = (c as f64 + 0.5) / side as f64;
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                let edge = 1.0 - smoothstep(radius * 0.6, radius, d);
                if edge > 0.0 {
                    let a = alpha * edge;
                    let base = (r * side + c) * 3;
                    for ch in 0..3 {
                        px[base + ch] = (px[base + ch] * (1.0 - a) + color[ch] * a).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
}

/// Multiplies a random subset of pixels by random factors (gas-bubble speckle).
fn overlay_speckle<R: Rng>(px: &mut [f64], rng: &mut R) {
    let pixels = px.len() / 3;
    for p in 0..pixels {
        if rng.gen_bool(0.35) {
            let f = 0.5 + rng.gen::<f64>();
            for ch in 0..3 {
                px[p * 3 + ch] = (px[p * 3 + ch] * f).clamp(0.0, 1.0);
            }
        }
    }
}

/// Two-pass separable box blur with the given radius.
fn box_blur(px: &mut Vec<f64>, side: usize, radius: usize) {
    for _ in 0..2 {
        // Horizontal then vertical pass.
        for (stride_r, stride_c, horizontal) in [(side, 1usize, true), (1, side, false)] {
            let src = px.clone();
            for a in 0..side {
                for b in 0..side {
                    let mut acc = [0.0; 3];
                    let mut n = 0.0;
                    let lo = b.saturating_sub(radius);
                    let hi = (b + radius).min(side - 1);
                    for t in lo..=hi {
                        let (r, c) = if horizontal { (a, t) } else { (t, a) };
                        let idx = (r * stride_r + c * stride_c) * 3;
                        for ch in 0..3 {
                            acc[ch] += src[idx + ch];
                        }
                        n += 1.0;
                    }
                    let (r, c) = if horizontal { (a, b) } else { (b, a) };
                    let idx = (r * stride_r + c * stride_c) * 3;
                    for ch in 0..3 {
                        px[idx + ch] = acc[ch] / n;
                    }
                }
            }
        }
    }
}

/// Pulls every pixel toward its gray value; `keep` = 1 leaves colors intact.
fn desaturate(px: &mut [f64], keep: f64) {
    for p in px.chunks_mut(3) {
        let gray = (p[0] + p[1] + p[2]) / 3.0;
        for v in p {
            *v = gray + keep * (*v - gray);
        }
    }
}

fn write_png(path: &Path, pixels: &[f64], side: usize) -> Result<()> {
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(side as u32, side as u32, bytes)
        .expect("buffer size matches dimensions");
    img.save(path)?;
    Ok(())
}

/// A quick structural check that a directory looks like a generated dataset.
pub fn dataset_complete(dir: &Path) -> bool {
    let manifest = dir.join("manifest.jsonl");
    manifest.is_file()
        && std::fs::read_to_string(&manifest)
            .map(|t| t.starts_with(MANIFEST_HEADER))
            .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn checksum_dir(dir: &Path) -> String {
        let mut files: Vec<_> = walk(dir);
        files.sort();
        let mut h = Sha256::new();
        for f in files {
            // Hash paths relative to the dataset root so two tempdirs compare.
            let rel = f.strip_prefix(dir).unwrap();
            h.update(rel.to_string_lossy().as_bytes());
            h.update(std::fs::read(&f).unwrap());
        }
        format!("{:x}", h.finalize())
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn counts_match_spec_example() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { image_px: 48, ..SynthSpec::default() };
        let (manifest, summary) = generate(&spec, 7, dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 96, "32 patients x 3 timepoints");
        assert_eq!(summary.images, 96);
        assert_eq!(summary.lr_patients, 16);
        assert_eq!(summary.ccr_patients, 16);
        assert_eq!(summary.test_pairs, 32, "one restaging/last-follow-up pair per patient");
        assert_eq!(summary.train_pairs, 96, "three ordered timepoint pairs per patient");
        assert!(summary.artifact_counts.is_empty(), "zero artifact probability leaves no tags");

        let masks = load_masks(&dir.path().join("masks.json")).unwrap();
        assert_eq!(masks.len(), 96);
        let n_png = walk(dir.path())
            .iter()
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .count();
        assert_eq!(n_png, 96);
        assert!(dataset_complete(dir.path()));
    }

    #[test]
    fn same_seed_reproduces_identical_bytes() {
        let spec = SynthSpec { patients: 4, image_px: 48, ..SynthSpec::default() };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let d3 = tempfile::tempdir().unwrap();
        generate(&spec, 11, d1.path()).unwrap();
        generate(&spec, 11, d2.path()).unwrap();
        generate(&spec, 12, d3.path()).unwrap();
        assert_eq!(checksum_dir(d1.path()), checksum_dir(d2.path()));
        assert_ne!(checksum_dir(d1.path()), checksum_dir(d3.path()));
    }

    #[test]
    fn artifact_probability_one_tags_every_image() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            patients: 4,
            image_px: 48,
            artifact_probs: ArtifactProbs { blood: 1.0, ..ArtifactProbs::default() },
            ..SynthSpec::default()
        };
        let (manifest, summary) = generate(&spec, 3, dir.path()).unwrap();
        for r in &manifest.records {
            assert!(r.artifacts.contains(&Artifact::Blood));
            assert!(!r.artifacts.contains(&Artifact::Stool));
        }
        assert_eq!(summary.artifact_counts["blood"], manifest.records.len());
    }

    #[test]
    fn lesion_grows_where_planted() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { patients: 4, image_px: 64, ..SynthSpec::default() };
        let (manifest, _) = generate(&spec, 5, dir.path()).unwrap();
        let masks = load_masks(&dir.path().join("masks.json")).unwrap();

        let load = |path: &str| -> Vec<f64> {
            let img = image::open(dir.path().join(path)).unwrap().into_rgb8();
            img.pixels().flat_map(|p| p.0.map(|v| v as f64 / 255.0)).collect()
        };
        let mut checked_lr = 0;
        for pid in manifest.patients().keys() {
            let recs: Vec<_> = manifest
                .records
                .iter()
                .filter(|r| &r.patient_id == pid)
                .collect();
            let first = recs.iter().find(|r| r.timepoint_index == 0).unwrap();
            let last = recs.iter().max_by_key(|r| r.timepoint_index).unwrap();
            if first.outcome != Outcome::Lr {
                continue;
            }
            let a = load(&first.image_path);
            let b = load(&last.image_path);
            let mask = masks[&last.image_path].rasterize(spec.image_px);
            let mut inside = (0.0f64, 0.0f64);
            let mut outside = (0.0f64, 0.0f64);
            for (i, &m) in mask.iter().enumerate() {
                let diff: f64 = (0..3).map(|ch| (a[i * 3 + ch] - b[i * 3 + ch]).abs()).sum();
                if m {
                    inside = (inside.0 + diff, inside.1 + 1.0);
                } else {
                    outside = (outside.0 + diff, outside.1 + 1.0);
                }
            }
            let inside_mean = inside.0 / inside.1.max(1.0);
            let outside_mean = outside.0 / outside.1.max(1.0);
            assert!(
                inside_mean > 2.0 * outside_mean,
                "lesion change {inside_mean:.4} should dominate background change {outside_mean:.4}"
            );
            checked_lr += 1;
        }
        assert!(checked_lr >= 1, "at least one LR patient generated");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad_ratio = SynthSpec { class_ratio: 0.0, ..SynthSpec::default() };
        assert_eq!(bad_ratio.validate().unwrap_err().exit_code(), 2);
        let one_tp = SynthSpec { timepoints: 1, ..SynthSpec::default() };
        assert_eq!(one_tp.validate().unwrap_err().exit_code(), 2);
        let bad_prob = SynthSpec {
            artifact_probs: ArtifactProbs { pq: 1.5, ..ArtifactProbs::default() },
            ..SynthSpec::default()
        };
        assert_eq!(bad_prob.validate().unwrap_err().exit_code(), 2);
        let tiny = SynthSpec { patients: 3, class_ratio: 0.05, ..SynthSpec::default() };
        assert_eq!(tiny.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn extra_images_expand_pair_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            patients: 8,
            image_px: 48,
            extra_image_prob: 0.5,
            ..SynthSpec::default()
        };
        let (manifest, summary) = generate(&spec, 9, dir.path()).unwrap();
        assert!(manifest.records.len() > 24, "extras should add images");
        assert!(summary.test_pairs >= 8);
        // Same-day images at one timepoint share acquisition dates, so the
        // manifest still validates (it would have failed generate otherwise).
    }
}
