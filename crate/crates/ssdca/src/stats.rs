//! Evaluation statistics: same-day top-k aggregation, classification metrics,
//! paired significance testing, and artifact-stratified robustness reports.
//!
//! The unit of evaluation is the [`PredictionRecord`]: one probability for one
//! image pair, tagged with the patient, the same-day group of its follow-up
//! image, and that image's artifact tags. Groups are aggregated before
//! metrics are computed, so all downstream numbers are per same-day visit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::Artifact;
use crate::error::Error;
use crate::Result;

/// One scored image pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub patient_id: String,
    /// Pairs whose follow-up images were acquired in the same session share
    /// this key and are aggregated together.
    pub same_day_group: String,
    pub probability: f64,
    /// 0.0 = cCR, 1.0 = LR (the positive class).
    pub label: f64,
    /// Artifact tags of the follow-up image.
    pub artifacts: BTreeSet<Artifact>,
}

/// How to combine the k highest probabilities of a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopkCombiner {
    Mean,
    Max,
}

impl Default for TopkCombiner {
    fn default() -> Self {
        TopkCombiner::Mean
    }
}

/// Combines a group's probabilities: mean (or max) of the `k` largest; groups
/// smaller than `k` use every member.
pub fn topk_aggregate(probs: &[f64], k: usize, combiner: TopkCombiner) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::shape("cannot aggregate an empty probability group"));
    }
    if k == 0 {
        return Err(Error::config("top-k aggregation needs k >= 1"));
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite probabilities"));
    let take = k.min(sorted.len());
    let top = &sorted[..take];
    Ok(match combiner {
        TopkCombiner::Mean => top.iter().sum::<f64>() / take as f64,
        TopkCombiner::Max => top[0],
    })
}

/// Collapses records into one record per same-day group using top-k
/// aggregation. Labels and patient ids must be consistent within a group;
/// artifact tags are unioned.
pub fn aggregate_groups(
    records: &[PredictionRecord],
    k: usize,
    combiner: TopkCombiner,
) -> Result<Vec<PredictionRecord>> {
    let mut groups: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.same_day_group).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        let first = members[0];
        for m in &members {
            if m.label != first.label || m.patient_id != first.patient_id {
                return Err(Error::shape(format!(
                    "group {key} mixes labels or patients; records are inconsistent"
                )));
            }
        }
        let probs: Vec<f64> = members.iter().map(|m| m.probability).collect();
        let probability = topk_aggregate(&probs, k, combiner)?;
        let mut artifacts = BTreeSet::new();
        for m in &members {
            artifacts.extend(m.artifacts.iter().copied());
        }
        out.push(PredictionRecord {
            patient_id: first.patient_id.clone(),
            same_day_group: key.to_string(),
            probability,
            label: first.label,
            artifacts,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

/// Confusion counts plus derived rates, as percentages in [0, 100].
///
/// A rate whose denominator is zero (single-class input) is `None`, with an
/// explanatory warning pushed to `warnings`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub warnings: Vec<String>,
}

/// Thresholds probabilities (positive when `p >= threshold`) and derives the
/// standard rates. LR (label 1) is the positive class.
pub fn compute_metrics(records: &[PredictionRecord], threshold: f64) -> MetricsReport {
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for r in records {
        let predicted_positive = r.probability >= threshold;
        let actually_positive = r.label > 0.5;
        match (predicted_positive, actually_positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut warnings = Vec::new();
    let total = tp + fp + tn + fn_;
    let accuracy = if total > 0 {
        Some((tp + tn) as f64 / total as f64 * 100.0)
    } else {
        warnings.push("no records; accuracy undefined".to_string());
        None
    };
    let sensitivity = if tp + fn_ > 0 {
        Some(tp as f64 / (tp + fn_) as f64 * 100.0)
    } else {
        warnings.push("no positive-class records; sensitivity undefined".to_string());
        None
    };
    let specificity = if tn + fp > 0 {
        Some(tn as f64 / (tn + fp) as f64 * 100.0)
    } else {
        warnings.push("no negative-class records; specificity undefined".to_string());
        None
    };
    let balanced_accuracy = match (sensitivity, specificity) {
        (Some(se), Some(sp)) => Some((se + sp) / 2.0),
        _ => {
            warnings.push("balanced accuracy undefined with a single class".to_string());
            None
        }
    };
    MetricsReport { tp, fp, tn, fn_, accuracy, balanced_accuracy, sensitivity, specificity, warnings }
}

// ---------------------------------------------------------------------------
// Paired t-test
// ---------------------------------------------------------------------------

/// Result of a two-sided paired t-test on `a - b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub t: f64,
    pub dof: usize,
    pub mean_diff: f64,
    /// Sample (n-1) standard deviation of the differences.
    pub sd_diff: f64,
    pub p_two_sided: Option<f64>,
    /// 95% confidence interval for the mean difference.
    pub ci95: Option<(f64, f64)>,
    /// True when all differences are identical; p and CI are withheld rather
    /// than reported as an exact 0-width claim.
    pub degenerate: bool,
}

/// Classical paired t-test; requires equal lengths and n >= 2.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "paired t-test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::shape(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let dof = n - 1;
    if sd == 0.0 {
        return Ok(PairedTTest {
            t: f64::NAN,
            dof,
            mean_diff: mean,
            sd_diff: 0.0,
            p_two_sided: None,
            ci95: None,
            degenerate: true,
        });
    }
    let se = sd / (n as f64).sqrt();
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::numerical(format!("Student-t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    let t_crit = dist.inverse_cdf(0.975);
    Ok(PairedTTest {
        t,
        dof,
        mean_diff: mean,
        sd_diff: sd,
        p_two_sided: Some(p.clamp(0.0, 1.0)),
        ci95: Some((mean - t_crit * se, mean + t_crit * se)),
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Robustness stratification
// ---------------------------------------------------------------------------

/// Probability histogram split by prediction correctness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins` equal-width bins over [0, 1].
    pub bins: usize,
    pub correct: Vec<u64>,
    pub incorrect: Vec<u64>,
}

impl Histogram {
    fn build(records: &[PredictionRecord], threshold: f64, bins: usize) -> Self {
        let mut correct = vec![0u64; bins];
        let mut incorrect = vec![0u64; bins];
        for r in records {
            let idx = ((r.probability * bins as f64) as usize).min(bins - 1);
            let is_correct = (r.probability >= threshold) == (r.label > 0.5);
            if is_correct {
                correct[idx] += 1;
            } else {
                incorrect[idx] += 1;
            }
        }
        Histogram { bins, correct, incorrect }
    }
}

/// Metrics and histogram for one artifact stratum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    /// `blood`, `stool`, `TLG`, `PQ`, or `clean` (no tags).
    pub stratum: String,
    pub n: usize,
    pub metrics: MetricsReport,
    pub histogram: Histogram,
}

/// Per-artifact breakdown of a prediction set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub strata: Vec<StratumReport>,
    /// One note per empty stratum that was omitted.
    pub notes: Vec<String>,
}

pub const HISTOGRAM_BINS: usize = 10;

/// Partitions records by artifact tag (multi-tag records join every matching
/// stratum; untagged records form the `clean` stratum) and scores each.
pub fn robustness_report(records: &[PredictionRecord], threshold: f64) -> RobustnessReport {
    let mut strata = Vec::new();
    let mut notes = Vec::new();
    let mut add = |name: &str, members: Vec<PredictionRecord>| {
        if members.is_empty() {
            notes.push(format!("stratum {name} has no records; omitted"));
            return;
        }
        strata.push(StratumReport {
            stratum: name.to_string(),
            n: members.len(),
            metrics: compute_metrics(&members, threshold),
            histogram: Histogram::build(&members, threshold, HISTOGRAM_BINS),
        });
    };
    let clean: Vec<PredictionRecord> = records
        .iter()
        .filter(|r| r.artifacts.is_empty())
        .cloned()
        .collect();
    add("clean", clean);
    for tag in Artifact::ALL {
        let members: Vec<PredictionRecord> = records
            .iter()
            .filter(|r| r.artifacts.contains(&tag))
            .cloned()
            .collect();
        add(tag.as_str(), members);
    }
    RobustnessReport { strata, notes }
}

// ---------------------------------------------------------------------------
// CSV export
// ---------------------------------------------------------------------------

fn fmt_rate(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "NA".to_string(),
    }
}

fn fmt_tags(tags: &BTreeSet<Artifact>) -> String {
    tags.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(";")
}

/// `patient_id,group,probability,label,artifacts` rows.
pub fn predictions_csv(records: &[PredictionRecord]) -> String {
    let mut out = String::from("patient_id,group,probability,label,artifacts\n");
    for r in records {
        // Shortest-roundtrip float formatting keeps the CSV the exact record
        // of what was computed: re-parsing it reproduces identical metrics.
        writeln!(
            out,
            "{},{},{},{},{}",
            r.patient_id,
            r.same_day_group,
            r.probability,
            r.label as i64,
            fmt_tags(&r.artifacts)
        )
        .expect("string write");
    }
    out
}

/// Parses a predictions CSV written by [`predictions_csv`] back into
/// records; errors name the offending line.
pub fn parse_predictions_csv(text: &str) -> Result<Vec<PredictionRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == "patient_id,group,probability,label,artifacts" => {}
        Some((_, other)) => {
            return Err(Error::format(format!("unexpected predictions header `{other}`")))
        }
        None => return Err(Error::format("empty predictions file")),
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::format(format!(
                "line {}: expected 5 fields, found {}",
                idx + 1,
                fields.len()
            )));
        }
        let probability: f64 = fields[2]
            .parse()
            .map_err(|_| Error::format(format!("line {}: bad probability `{}`", idx + 1, fields[2])))?;
        let label: f64 = fields[3]
            .parse()
            .map_err(|_| Error::format(format!("line {}: bad label `{}`", idx + 1, fields[3])))?;
        let mut artifacts = BTreeSet::new();
        if !fields[4].is_empty() {
            for tag in fields[4].split(';') {
                artifacts.insert(Artifact::parse(tag).map_err(|e| {
                    Error::format(format!("line {}: {e}", idx + 1))
                })?);
            }
        }
        records.push(PredictionRecord {
            patient_id: fields[0].to_string(),
            same_day_group: fields[1].to_string(),
            probability,
            label,
            artifacts,
        });
    }
    Ok(records)
}

/// `stratum,n,tp,fp,tn,fn,accuracy,balanced_accuracy,sensitivity,specificity` rows.
pub fn robustness_metrics_csv(report: &RobustnessReport) -> String {
    let mut out =
        String::from("stratum,n,tp,fp,tn,fn,accuracy,balanced_accuracy,sensitivity,specificity\n");
    for s in &report.strata {
        let m = &s.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.stratum,
            s.n,
            m.tp,
            m.fp,
            m.tn,
            m.fn_,
            fmt_rate(m.accuracy),
            fmt_rate(m.balanced_accuracy),
            fmt_rate(m.sensitivity),
            fmt_rate(m.specificity),
        )
        .expect("string write");
    }
    out
}

/// `stratum,bin_lo,bin_hi,outcome,count` rows, plot-ready.
pub fn robustness_histogram_csv(report: &RobustnessReport) -> String {
    let mut out = String::from("stratum,bin_lo,bin_hi,outcome,count\n");
    for s in &report.strata {
        let h = &s.histogram;
        for bin in 0..h.bins {
            let lo = bin as f64 / h.bins as f64;
            let hi = (bin + 1) as f64 / h.bins as f64;
            for (outcome, counts) in [("correct", &h.correct), ("incorrect", &h.incorrect)] {
                writeln!(out, "{},{lo:.1},{hi:.1},{outcome},{}", s.stratum, counts[bin])
                    .expect("string write");
            }
        }
    }
    out
}
