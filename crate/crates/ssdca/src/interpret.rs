//! Post-hoc model inspection: embedding extraction, cluster-separation
//! metrics, deterministic 2-D projection, GradCAM heatmaps, and
//! cross-attention correspondence maps.
//!
//! All analyses run on a frozen model in evaluation mode.

use std::fmt::Write as _;

use crate::data::{ImageStore, LongitudinalPair, Manifest};
use crate::error::Error;
use crate::model::{Model, Variant};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};
use crate::train::batch_tensors;
use crate::Result;

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

/// One head-input feature vector (the concatenated GAP features for pair
/// variants, a single GAP vector for the single-image baseline).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    /// `pre-image-path|post-image-path`.
    pub id: String,
    pub patient_id: String,
    pub label: f64,
    pub vector: Vec<f64>,
}

/// Captures the vector entering the classification head for every pair.
pub fn extract_embeddings<F: Scalar>(
    model: &Model,
    params: &ParamSet<F>,
    store: &ImageStore,
    manifest: &Manifest,
    pairs: &[LongitudinalPair],
    batch_size: usize,
) -> Result<Vec<EmbeddingRecord>> {
    let leaves = params.leaves(false);
    let width = model.head_input_width();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&LongitudinalPair> = chunk.iter().collect();
        let (pre, post, _) = batch_tensors::<F>(store, manifest, &refs, None)?;
        let trace = model.forward(&pre, Some(&post), refs.len(), &leaves, None)?;
        let flat = trace.embedding.to_f64_vec();
        debug_assert_eq!(flat.len(), refs.len() * width);
        for (i, pair) in chunk.iter().enumerate() {
            let vector = flat[i * width..(i + 1) * width].to_vec();
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite embedding for pair ({}, {})",
                    manifest.records[pair.pre].image_path, manifest.records[pair.post].image_path
                )));
            }
            out.push(EmbeddingRecord {
                id: format!(
                    "{}|{}",
                    manifest.records[pair.pre].image_path, manifest.records[pair.post].image_path
                ),
                patient_id: pair.patient_id.clone(),
                label: pair.label,
                vector,
            });
        }
    }
    Ok(out)
}

/// `id,patient_id,label,v0,...,v{d-1}` rows.
pub fn embeddings_csv(records: &[EmbeddingRecord]) -> String {
    let dim = records.first().map(|r| r.vector.len()).unwrap_or(0);
    let mut header = String::from("id,patient_id,label");
    for i in 0..dim {
        write!(header, ",v{i}").expect("string write");
    }
    header.push('\n');
    let mut out = header;
    for r in records {
        write!(out, "{},{},{}", r.id, r.patient_id, r.label as i64).expect("string write");
        for v in &r.vector {
            write!(out, ",{v:.6}").expect("string write");
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Cluster metrics
// ---------------------------------------------------------------------------

/// Centroid-based class-separation measures.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterMetrics {
    /// Euclidean distance between the two class centroids.
    pub inter: f64,
    /// Mean over classes of the mean point-to-own-centroid distance.
    pub intra: f64,
}

/// Computes the two measures over points labeled 0/1; errors when either
/// class is missing or inputs are inconsistent.
pub fn cluster_metrics(points: &[Vec<f64>], labels: &[f64]) -> Result<ClusterMetrics> {
    if points.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    if points.is_empty() {
        return Err(Error::shape("cluster metrics need at least one point per class"));
    }
    let dim = points[0].len();
    let mut groups: [Vec<&Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for (p, l) in points.iter().zip(labels) {
        if p.len() != dim {
            return Err(Error::shape("points have inconsistent dimensions"));
        }
        groups[usize::from(*l > 0.5)].push(p);
    }
    if groups[0].is_empty() || groups[1].is_empty() {
        return Err(Error::config(
            "cluster metrics need both classes present in the labels",
        ));
    }
    let centroid = |g: &[&Vec<f64>]| -> Vec<f64> {
        let mut c = vec![0.0; dim];
        for p in g {
            for (ci, vi) in c.iter_mut().zip(p.iter()) {
                *ci += vi;
            }
        }
        for ci in &mut c {
            *ci /= g.len() as f64;
        }
        c
    };
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let c0 = centroid(&groups[0]);
    let c1 = centroid(&groups[1]);
    let inter = dist(&c0, &c1);
    let spread = |g: &[&Vec<f64>], c: &[f64]| -> f64 {
        g.iter().map(|p| dist(p, c)).sum::<f64>() / g.len() as f64
    };
    let intra = (spread(&groups[0], &c0) + spread(&groups[1], &c1)) / 2.0;
    Ok(ClusterMetrics { inter, intra })
}

// ---------------------------------------------------------------------------
// 2-D projection
// ---------------------------------------------------------------------------

/// Projection method for visualization-space metrics.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    /// Deterministic top-2 principal components.
    Pca,
    /// Coordinates computed elsewhere (e.g. by a UMAP implementation),
    /// ingested for metric computation.
    External(Vec<[f64; 2]>),
}

/// Result of [`project_2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    pub coords: Vec<[f64; 2]>,
    pub warnings: Vec<String>,
}

/// Projects points to 2-D. The PCA path centers the data, extracts the top
/// two principal components by power iteration with deflation, orders them by
/// variance, and fixes each component's sign so its largest-magnitude loading
/// is positive. All-identical inputs yield all-zero coordinates plus a
/// warning.
pub fn project_2d(points: &[Vec<f64>], method: Projection) -> Result<Projected> {
    let n = points.len();
    if n < 3 {
        return Err(Error::shape(format!("projection needs at least 3 points, got {n}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("points have inconsistent dimensions"));
    }
    if let Projection::External(coords) = method {
        if coords.len() != n {
            return Err(Error::shape(format!(
                "external coordinates have {} rows for {} points",
                coords.len(),
                n
            )));
        }
        return Ok(Projected { coords, warnings: Vec::new() });
    }

    // Center.
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let total_var: f64 =
        centered.iter().flat_map(|p| p.iter().map(|v| v * v)).sum::<f64>() / n as f64;
    let mut warnings = Vec::new();
    if total_var <= 1e-24 {
        warnings.push("all points identical; projection is all-zero".to_string());
        return Ok(Projected { coords: vec![[0.0, 0.0]; n], warnings });
    }

    // Power iteration on the covariance operator v -> X^T (X v) / n, with
    // deflation of the data for the second component.
    let mut data = centered.clone();
    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut variances: Vec<f64> = Vec::new();
    for comp in 0..2 {
        let mut rng = crate::seeded_rng(0, &format!("pca.power.{comp}"));
        let mut v: Vec<f64> = (0..dim).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..1000 {
            // w = X^T (X v) / n
            let mut w = vec![0.0; dim];
            for row in &data {
                let s: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (wi, ri) in w.iter_mut().zip(row) {
                    *wi += s * ri;
                }
            }
            for wi in &mut w {
                *wi /= n as f64;
            }
            let new_lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if new_lambda <= 1e-18 {
                lambda = 0.0;
                break;
            }
            for wi in &mut w {
                *wi /= new_lambda;
            }
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            lambda = new_lambda;
            if delta < 1e-14 {
                break;
            }
        }
        if lambda <= 1e-15 * total_var.max(1.0) {
            // No variance left: remaining coordinate collapses to zero.
            components.push(vec![0.0; dim]);
            variances.push(0.0);
            continue;
        }
        // Sign convention: largest-magnitude loading is positive.
        let max_idx = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[max_idx] < 0.0 {
            for vi in &mut v {
                *vi = -*vi;
            }
        }
        // Deflate: remove this component's contribution from the data.
        for row in &mut data {
            let s: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (ri, vi) in row.iter_mut().zip(&v) {
                *ri -= s * vi;
            }
        }
        variances.push(lambda);
        components.push(v);
    }
    // Order by variance (descending); power iteration already finds the
    // dominant one first, so this is a defensive swap.
    if variances.len() == 2 && variances[1] > variances[0] {
        components.swap(0, 1);
        variances.swap(0, 1);
    }
    let coords: Vec<[f64; 2]> = centered
        .iter()
        .map(|p| {
            let x: f64 = p.iter().zip(&components[0]).map(|(a, b)| a * b).sum();
            let y: f64 = p.iter().zip(&components[1]).map(|(a, b)| a * b).sum();
            [x, y]
        })
        .collect();
    Ok(Projected { coords, warnings })
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}

/// `id,patient_id,label,x,y` rows for plotting.
pub fn projection_csv(records: &[EmbeddingRecord], coords: &[[f64; 2]]) -> String {
    let mut out = String::from("id,patient_id,label,x,y\n");
    for (r, c) in records.iter().zip(coords) {
        writeln!(out, "{},{},{},{:.6},{:.6}", r.id, r.patient_id, r.label as i64, c[0], c[1])
            .expect("string write");
    }
    out
}

/// Cluster metrics in both measurement spaces.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterReport {
    /// Computed on the 2-D projected coordinates (figure space).
    pub projected: ClusterMetrics,
    /// Computed on the raw embedding vectors.
    pub raw: ClusterMetrics,
}

/// Convenience wrapper: projects embeddings and scores both spaces.
pub fn cluster_report(
    records: &[EmbeddingRecord],
    method: Projection,
) -> Result<(ClusterReport, Projected)> {
    let points: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
    let labels: Vec<f64> = records.iter().map(|r| r.label).collect();
    let raw = cluster_metrics(&points, &labels)?;
    let projected = project_2d(&points, method)?;
    let coords2: Vec<Vec<f64>> = projected.coords.iter().map(|c| c.to_vec()).collect();
    let proj_metrics = cluster_metrics(&coords2, &labels)?;
    Ok((ClusterReport { projected: proj_metrics, raw }, projected))
}

// ---------------------------------------------------------------------------
// GradCAM
// ---------------------------------------------------------------------------

/// Class-activation heatmap over the restaging (pre) image.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Feature-grid side length.
    pub grid: usize,
    /// `grid*grid` values in [0, 1] (row-major).
    pub values: Vec<f64>,
    /// Bilinear upsampling of `values` to `image_px * image_px`.
    pub upsampled: Vec<f64>,
    pub image_px: usize,
    /// Gradient-GAP weight per feature channel (sign-preserving).
    pub channel_weights: Vec<f64>,
    pub warnings: Vec<String>,
}

impl Heatmap {
    /// Boolean mask of the top `fraction` (by value) of upsampled pixels.
    pub fn top_fraction_mask(&self, fraction: f64) -> Vec<bool> {
        let n = self.upsampled.len();
        let keep = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            self.upsampled[b]
                .partial_cmp(&self.upsampled[a])
                .expect("finite heat values")
                .then(a.cmp(&b))
        });
        let mut mask = vec![false; n];
        for &i in &order[..keep] {
            mask[i] = true;
        }
        mask
    }
}

/// Intersection-over-union of two boolean masks.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "mask sizes differ");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// GradCAM at the fusion-stage features of the pre branch.
///
/// The positive-class logit (negated when `negate_target`) is backpropagated
/// to the pre-branch feature map; channel weights are the spatial means of
/// those gradients, the map is `ReLU(sum_c w_c F_c)`, min-max normalized, and
/// bilinearly upsampled to the model's input resolution. A model whose
/// gradient vanishes everywhere yields the uniform-zero map plus a warning.
pub fn gradcam<F: Scalar>(
    model: &Model,
    params: &ParamSet<F>,
    pre: &Tensor<F>,
    post: Option<&Tensor<F>>,
    negate_target: bool,
) -> Result<Heatmap> {
    let leaves = params.leaves(true);
    let trace = model.forward(pre, post, 1, &leaves, None)?;
    let stage = match model.cfg.variant {
        Variant::Single => 4,
        _ => model.cfg.fusion_stage,
    };
    let feature_map = &trace.stages_pre[stage - 1];
    let grid = feature_map.grid;
    let tokens = grid * grid;
    let channels = feature_map.channels();

    let target = if negate_target { trace.logits.scale(-1.0) } else { trace.logits.clone() };
    target.backward();

    let mut warnings = Vec::new();
    let grads = match feature_map.tokens.grad() {
        Some(g) => g.iter().map(|v| v.to_f64()).collect::<Vec<f64>>(),
        None => {
            warnings.push("no gradient reached the feature map".to_string());
            vec![0.0; tokens * channels]
        }
    };
    let features = feature_map.tokens.to_f64_vec();

    // Channel weights: spatial mean of the gradients.
    let mut channel_weights = vec![0.0; channels];
    for t in 0..tokens {
        for c in 0..channels {
            channel_weights[c] += grads[t * channels + c];
        }
    }
    for w in &mut channel_weights {
        *w /= tokens as f64;
    }

    // ReLU-rectified weighted combination.
    let mut cam = vec![0.0; tokens];
    for t in 0..tokens {
        let mut s = 0.0;
        for c in 0..channels {
            s += channel_weights[c] * features[t * channels + c];
        }
        cam[t] = s.max(0.0);
    }
    let max = cam.iter().cloned().fold(f64::MIN, f64::max);
    let min = cam.iter().cloned().fold(f64::MAX, f64::min);
    if max - min <= 0.0 {
        warnings.push(
            "gradient-weighted map is constant (zero gradients); emitting uniform-zero heatmap"
                .to_string(),
        );
        cam.iter_mut().for_each(|v| *v = 0.0);
    } else {
        cam.iter_mut().for_each(|v| *v = (*v - min) / (max - min));
    }

    let image_px = model.cfg.encoder.image_size;
    let upsampled = bilinear_upsample(&cam, grid, image_px);
    Ok(Heatmap { grid, values: cam, upsampled, image_px, channel_weights, warnings })
}

/// Bilinear interpolation of a square `src_side` map to `dst_side`.
fn bilinear_upsample(values: &[f64], src_side: usize, dst_side: usize) -> Vec<f64> {
    assert_eq!(values.len(), src_side * src_side);
    let mut out = vec![0.0; dst_side * dst_side];
    if src_side == 1 {
        out.fill(values[0]);
        return out;
    }
    let scale = src_side as f64 / dst_side as f64;
    for r in 0..dst_side {
        for c in 0..dst_side {
            // Align cell centers.
            let y = ((r as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_side - 1) as f64);
            let x = ((c as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_side - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(src_side - 1), (x0 + 1).min(src_side - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let v00 = values[y0 * src_side + x0];
            let v01 = values[y0 * src_side + x1];
            let v10 = values[y1 * src_side + x0];
            let v11 = values[y1 * src_side + x1];
            out[r * dst_side + c] = v00 * (1.0 - fy) * (1.0 - fx)
                + v01 * (1.0 - fy) * fx
                + v10 * fy * (1.0 - fx)
                + v11 * fy * fx;
        }
    }
    out
}

/// Renders a square map as CSV rows.
pub fn grid_csv(values: &[f64], side: usize) -> String {
    assert_eq!(values.len(), side * side);
    let mut out = String::new();
    for r in 0..side {
        let row: Vec<String> =
            (0..side).map(|c| format!("{:.6}", values[r * side + c])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Cross-attention correspondence
// ---------------------------------------------------------------------------

/// Head-averaged (or per-head) attention matrices of both DCA directions for
/// a single pair. Each matrix is `[tokens, tokens]` row-major: row = query
/// token in the direction's query image, column = key token in the other.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMaps {
    pub grid: usize,
    pub pre_to_post: Vec<f64>,
    pub post_to_pre: Vec<f64>,
    /// Per-head matrices (same layout) when requested.
    pub per_head: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl CorrespondenceMaps {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Spatial map of one query's attention over the other image's grid.
    pub fn query_map(&self, direction_pre_to_post: bool, query: usize) -> Vec<f64> {
        let t = self.tokens();
        assert!(query < t, "query token out of range");
        let m = if direction_pre_to_post { &self.pre_to_post } else { &self.post_to_pre };
        m[query * t..(query + 1) * t].to_vec()
    }
}

/// Extracts the dual cross-attention matrices for one pair; errors on
/// variants without a DCA block.
pub fn attention_correspondence<F: Scalar>(
    model: &Model,
    params: &ParamSet<F>,
    pre: &Tensor<F>,
    post: &Tensor<F>,
    per_head: bool,
) -> Result<CorrespondenceMaps> {
    if model.cfg.variant != Variant::Ssdca {
        return Err(Error::unsupported(format!(
            "attention correspondence requires the dual cross-attention variant, got {}",
            model.cfg.variant.as_str()
        )));
    }
    let leaves = params.leaves(false);
    let trace = model.forward(pre, Some(post), 1, &leaves, None)?;
    let dca = trace.dca.as_ref().expect("DCA variant produces a trace");
    let tokens = model.fusion_tokens();
    let grid = (tokens as f64).sqrt().round() as usize;
    debug_assert_eq!(grid * grid, tokens);

    let to_vec = |t: &Tensor<F>| -> Vec<f64> { t.to_f64_vec() };
    let heads = dca.pre_to_post.len();
    let mut avg_fwd = vec![0.0; tokens * tokens];
    let mut avg_bwd = vec![0.0; tokens * tokens];
    let mut per_head_maps = Vec::new();
    for h in 0..heads {
        let f = to_vec(&dca.pre_to_post[h]);
        let b = to_vec(&dca.post_to_pre[h]);
        debug_assert_eq!(f.len(), tokens * tokens);
        for i in 0..tokens * tokens {
            avg_fwd[i] += f[i] / heads as f64;
            avg_bwd[i] += b[i] / heads as f64;
        }
        if per_head {
            per_head_maps.push((f, b));
        }
    }
    Ok(CorrespondenceMaps {
        grid,
        pre_to_post: avg_fwd,
        post_to_pre: avg_bwd,
        per_head: per_head.then_some(per_head_maps),
    })
}

/// Index of the feature-grid cell containing fractional coordinates (x, y).
pub fn grid_cell_of(grid: usize, x: f64, y: f64) -> usize {
    let col = ((x * grid as f64) as usize).min(grid - 1);
    let row = ((y * grid as f64) as usize).min(grid - 1);
    row * grid + col
}

/// Rasterizes a fractional-coordinate disk onto the feature grid.
pub fn grid_mask_of_disk(grid: usize, cx: f64, cy: f64, radius: f64) -> Vec<bool> {
    let mut mask = vec![false; grid * grid];
    for r in 0..grid {
        for c in 0..grid {
            let y = (r as f64 + 0.5) / grid as f64;
            let x = (c as f64 + 0.5) / grid as f64;
            let (dx, dy) = (x - cx, y - cy);
            mask[r * grid + c] = dx * dx + dy * dy <= radius * radius;
        }
    }
    mask
}

/// Helper bundling both interpretability maps for a dataset pair.
pub fn pair_tensors<F: Scalar>(
    store: &ImageStore,
    manifest: &Manifest,
    pair: &LongitudinalPair,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (pre, post, _) = batch_tensors::<F>(store, manifest, &[pair], None)?;
    Ok((pre, post))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::swin::SwinConfig;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn cluster_two_point_oracle() {
        let points = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        let m = cluster_metrics(&points, &[0.0, 1.0]).unwrap();
        assert_eq!(m.inter, 5.0);
        assert_eq!(m.intra, 0.0);

        // Both classes from the same point mass.
        let same = vec![vec![1.0, 2.0]; 6];
        let labels = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let m = cluster_metrics(&same, &labels).unwrap();
        assert_eq!(m.inter, 0.0);
        assert_eq!(m.intra, 0.0);

        assert!(cluster_metrics(&points, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn cluster_gaussian_monte_carlo_oracle() {
        let mut rng = crate::seeded_rng(55, "test.cluster.gauss");
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2 {
            let offset = if class == 0 { 0.0 } else { 10.0 };
            for _ in 0..500 {
                let x: f64 = StandardNormal.sample(&mut rng);
                let y: f64 = StandardNormal.sample(&mut rng);
                points.push(vec![x + offset, y]);
                labels.push(class as f64);
            }
        }
        let m = cluster_metrics(&points, &labels).unwrap();
        assert!((m.inter - 10.0).abs() < 0.2, "inter {}", m.inter);
        let expected = (std::f64::consts::PI / 2.0).sqrt();
        assert!((m.intra - expected).abs() < 0.05, "intra {} vs {expected}", m.intra);
    }

    #[test]
    fn cluster_metrics_similarity_transforms() {
        let mut rng = crate::seeded_rng(8, "test.cluster.sim");
        let points: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.gen::<f64>() * 4.0, rng.gen::<f64>() * 4.0])
            .collect();
        let labels: Vec<f64> = (0..40).map(|i| (i % 2) as f64).collect();
        let base = cluster_metrics(&points, &labels).unwrap();

        let theta: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
        let (s, t) = (2.5f64, [3.0f64, -1.0f64]);
        let rotated: Vec<Vec<f64>> = points
            .iter()
            .map(|p| {
                vec![
                    theta.cos() * p[0] - theta.sin() * p[1] + t[0],
                    theta.sin() * p[0] + theta.cos() * p[1] + t[1],
                ]
            })
            .collect();
        let m = cluster_metrics(&rotated, &labels).unwrap();
        assert!((m.inter - base.inter).abs() < 1e-9);
        assert!((m.intra - base.intra).abs() < 1e-9);

        let scaled: Vec<Vec<f64>> = points.iter().map(|p| vec![s * p[0], s * p[1]]).collect();
        let m = cluster_metrics(&scaled, &labels).unwrap();
        assert!((m.inter - s * base.inter).abs() < 1e-9);
        assert!((m.intra - s * base.intra).abs() < 1e-9);
    }

    #[test]
    fn pca_preserves_distances_on_intrinsically_2d_data() {
        let mut rng = crate::seeded_rng(21, "test.pca.planar");
        // Random 2-D latent points embedded in 5-D by an orthonormal map.
        let latent: Vec<[f64; 2]> =
            (0..30).map(|_| [rng.gen::<f64>() * 3.0, rng.gen::<f64>() * 2.0]).collect();
        // Build two orthonormal 5-D directions via Gram-Schmidt.
        let mut u: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();
        normalize(&mut u);
        let mut w: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();
        let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
        for (wi, ui) in w.iter_mut().zip(&u) {
            *wi -= dot * ui;
        }
        normalize(&mut w);
        let offset: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() * 10.0).collect();
        let points: Vec<Vec<f64>> = latent
            .iter()
            .map(|l| {
                (0..5)
                    .map(|d| offset[d] + l[0] * u[d] + l[1] * w[d])
                    .collect()
            })
            .collect();

        let proj = project_2d(&points, Projection::Pca).unwrap();
        assert!(proj.warnings.is_empty());
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let d_hi: f64 = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let dx = proj.coords[i][0] - proj.coords[j][0];
                let dy = proj.coords[i][1] - proj.coords[j][1];
                let d_lo = (dx * dx + dy * dy).sqrt();
                assert!(
                    (d_hi - d_lo).abs() < 1e-8,
                    "pair ({i},{j}): {d_hi} vs {d_lo}"
                );
            }
        }
    }

    #[test]
    fn pca_variance_ordering_and_sign_convention() {
        let mut rng = crate::seeded_rng(3, "test.pca.order");
        // Elongated cloud: x-variance 25, y-variance 1, in 3-D with noise-free z.
        let points: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                vec![5.0 * a, b, 0.0]
            })
            .collect();
        let proj = project_2d(&points, Projection::Pca).unwrap();
        let (mut var_x, mut var_y) = (0.0, 0.0);
        let n = points.len() as f64;
        let (mx, my) = proj
            .coords
            .iter()
            .fold((0.0, 0.0), |acc, c| (acc.0 + c[0] / n, acc.1 + c[1] / n));
        for c in &proj.coords {
            var_x += (c[0] - mx).powi(2) / n;
            var_y += (c[1] - my).powi(2) / n;
        }
        assert!(var_x >= var_y, "component-1 variance {var_x} < component-2 {var_y}");
        assert!(var_x > 15.0 && var_x < 40.0);

        // Determinism: identical run, identical coordinates.
        let again = project_2d(&points, Projection::Pca).unwrap();
        assert_eq!(proj.coords, again.coords);
    }

    #[test]
    fn pca_degenerate_and_external_modes() {
        let same = vec![vec![2.0, 2.0, 2.0]; 5];
        let proj = project_2d(&same, Projection::Pca).unwrap();
        assert!(proj.coords.iter().all(|c| c == &[0.0, 0.0]));
        assert_eq!(proj.warnings.len(), 1);

        let coords = vec![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0], [9.0, 0.0]];
        let ext = project_2d(&same, Projection::External(coords.clone())).unwrap();
        assert_eq!(ext.coords, coords);
        assert!(project_2d(&same, Projection::External(vec![[0.0, 0.0]])).is_err());
        assert!(project_2d(&same[..2], Projection::Pca).is_err());
    }

    fn toy_model(variant: Variant) -> (Model, ParamSet<f32>) {
        let model = Model::new(ModelConfig::new(SwinConfig::toy(), variant)).unwrap();
        let params = model.init_params(99);
        (model, params)
    }

    fn random_image(model: &Model, seed: u64) -> Tensor<f32> {
        let px = model.cfg.encoder.image_size * model.cfg.encoder.image_size;
        let mut rng = crate::seeded_rng(seed, "test.interpret.image");
        let data: Vec<f64> = (0..px * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_f64_slice(&data, vec![px, 3])
    }

    #[test]
    fn gradcam_contract_and_sign_flip() {
        let (model, params) = toy_model(Variant::Ssdca);
        let pre = random_image(&model, 1);
        let post = random_image(&model, 2);
        let heat = gradcam(&model, &params, &pre, Some(&post), false).unwrap();
        let grid = model.cfg.encoder.stage_grid(model.cfg.fusion_stage - 1);
        assert_eq!(heat.grid, grid);
        assert_eq!(heat.values.len(), grid * grid);
        assert_eq!(heat.upsampled.len(), 64 * 64);
        assert!(heat.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(heat.upsampled.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        assert!(heat.warnings.is_empty());

        // Negating the target flips every channel weight.
        let negated = gradcam(&model, &params, &pre, Some(&post), true).unwrap();
        for (a, b) in heat.channel_weights.iter().zip(&negated.channel_weights) {
            assert!((a + b).abs() < 1e-6, "weights should negate: {a} vs {b}");
        }
    }

    #[test]
    fn gradcam_zero_head_weights_degenerates_exactly() {
        let (model, mut params) = toy_model(Variant::Ssdca);
        let zeros = vec![0f32; model.cfg.head_hidden];
        params.set_values("head.fc2.weight", zeros);
        let pre = random_image(&model, 3);
        let post = random_image(&model, 4);
        let heat = gradcam(&model, &params, &pre, Some(&post), false).unwrap();
        assert!(heat.values.iter().all(|&v| v == 0.0), "uniform-zero map expected");
        assert!(heat.upsampled.iter().all(|&v| v == 0.0));
        assert!(!heat.warnings.is_empty());
    }

    #[test]
    fn attention_correspondence_properties() {
        let (model, params) = toy_model(Variant::Ssdca);
        let pre = random_image(&model, 5);
        let post = random_image(&model, 6);
        let maps = attention_correspondence(&model, &params, &pre, &post, true).unwrap();
        let t = maps.tokens();
        assert_eq!(t, model.fusion_tokens());

        // Row-stochastic in both directions, head-averaged and per-head.
        let check_rows = |m: &[f64]| {
            for q in 0..t {
                let sum: f64 = m[q * t..(q + 1) * t].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row {q} sums to {sum}");
                assert!(m[q * t..(q + 1) * t].iter().all(|&v| v >= 0.0));
            }
        };
        check_rows(&maps.pre_to_post);
        check_rows(&maps.post_to_pre);
        for (f, b) in maps.per_head.as_ref().unwrap() {
            check_rows(f);
            check_rows(b);
        }

        // Query map extraction is the matrix row.
        let q = 3;
        let qm = maps.query_map(true, q);
        assert_eq!(qm, maps.pre_to_post[q * t..(q + 1) * t].to_vec());
        let sum: f64 = qm.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);

        // Identical images: both directional matrices coincide.
        let same = attention_correspondence(&model, &params, &pre, &pre, false).unwrap();
        for (a, b) in same.pre_to_post.iter().zip(&same.post_to_pre) {
            assert!((a - b).abs() < 1e-5);
        }

        // Non-DCA variants refuse.
        let (ssfc, ssfc_params) = toy_model(Variant::Ssfc);
        let err = attention_correspondence(&ssfc, &ssfc_params, &pre, &post, false).unwrap_err();
        assert!(err.to_string().contains("dual cross-attention"), "{err}");
    }

    #[test]
    fn embeddings_have_variant_widths_and_are_deterministic() {
        use crate::data::{synth, ImageStore, Normalization, PairMode};
        let dir = tempfile::tempdir().unwrap();
        let spec = synth::SynthSpec {
            patients: 4,
            image_px: 64,
            ..synth::SynthSpec::default()
        };
        let (manifest, _) = synth::generate(&spec, 31, dir.path()).unwrap();
        let (pairs, _) = crate::data::build_pairs(&manifest, PairMode::Test);
        assert!(!pairs.is_empty());

        for (variant, width_factor) in
            [(Variant::Ssdca, 2), (Variant::Ssfc, 2), (Variant::Single, 1)]
        {
            let (model, params) = toy_model(variant);
            let store =
                ImageStore::new(&manifest, model.cfg.encoder.image_size, Normalization::default());
            let embs =
                extract_embeddings(&model, &params, &store, &manifest, &pairs, 4).unwrap();
            assert_eq!(embs.len(), pairs.len());
            let expected_width = width_factor * model.fusion_channels();
            for e in &embs {
                assert_eq!(e.vector.len(), expected_width);
            }
            let again = extract_embeddings(&model, &params, &store, &manifest, &pairs, 2).unwrap();
            assert_eq!(embs, again, "batch size must not change embeddings");

            let csv = embeddings_csv(&embs);
            assert!(csv.starts_with("id,patient_id,label,v0"));
            assert_eq!(csv.lines().count(), 1 + embs.len());
        }
    }

    #[test]
    fn grid_helpers() {
        assert_eq!(grid_cell_of(4, 0.1, 0.1), 0);
        assert_eq!(grid_cell_of(4, 0.9, 0.1), 3);
        assert_eq!(grid_cell_of(4, 0.1, 0.9), 12);
        assert_eq!(grid_cell_of(4, 1.0, 1.0), 15);

        let mask = grid_mask_of_disk(4, 0.3, 0.3, 0.2);
        assert!(mask[1 * 4 + 1]);
        assert!(!mask[3 * 4 + 3]);

        let a = vec![true, true, false, false];
        let b = vec![true, false, true, false];
        assert!((mask_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);

        let up = bilinear_upsample(&[0.0, 1.0, 1.0, 0.0], 2, 8);
        assert_eq!(up.len(), 64);
        assert!(up.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let csv = grid_csv(&[0.25, 0.5, 0.75, 1.0], 2);
        assert_eq!(csv, "0.250000,0.500000\n0.750000,1.000000\n");
    }
}
