//! Hierarchical shifted-window transformer encoder.
//!
//! One encoder instance (one parameter set) is applied to every image; the
//! Siamese property of the pair model is simply that both images pass through
//! the same parameters. The forward operates on a batch of images flattened
//! to pixel rows, and every spatial rearrangement is a precomputed row gather
//! (see [`plan`]).

mod config;
pub mod plan;

pub use config::SwinConfig;

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{Leaves, ParamSet};
use crate::tensor::{Scalar, SoftmaxMask, Tensor};
use crate::Result;

use plan::{batched_indices, merge_indices, patch_pixel_index, relative_position_index, WindowPlan};

/// Epsilon inside every layer-norm denominator.
pub const LN_EPS: f64 = 1e-6;

/// Tokens of one stage for a batch of images: `[batch · grid², channels]`,
/// image-major, tokens row-major over the grid.
pub struct FeatureMap<F: Scalar> {
    pub tokens: Tensor<F>,
    pub grid: usize,
    pub stage_index: usize,
    pub batch: usize,
}

impl<F: Scalar> FeatureMap<F> {
    pub fn channels(&self) -> usize {
        *self.tokens.shape().last().unwrap()
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid * self.grid
    }
}

/// Stochastic regularizers (feature dropout, per-branch stochastic depth,
/// and the classification head's own dropout). `None` anywhere in the
/// forward API means fully deterministic evaluation.
pub struct Dropouts {
    pub rate: f64,
    pub drop_path: f64,
    pub head_rate: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl Dropouts {
    pub fn new(rate: f64, drop_path: f64, head_rate: f64, seed: u64) -> Self {
        Dropouts {
            rate,
            drop_path,
            head_rate,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Position of the internal mask stream, for training-state snapshots.
    pub fn rng_word_pos(&self) -> u128 {
        self.rng.borrow().get_word_pos()
    }

    /// Restores the internal mask stream to a snapshotted position.
    pub fn set_rng_word_pos(&self, pos: u128) {
        self.rng.borrow_mut().set_word_pos(pos);
    }

    fn bernoulli_mask<F: Scalar>(&self, n: usize, rate: f64) -> Option<Arc<Vec<F>>> {
        if rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - rate;
        let scale = F::from_f64(1.0 / keep);
        let mut rng = self.rng.borrow_mut();
        Some(Arc::new(
            (0..n)
                .map(|_| if rng.gen::<f64>() < keep { scale } else { F::ZERO })
                .collect(),
        ))
    }

    fn feature_mask<F: Scalar>(&self, n: usize) -> Option<Arc<Vec<F>>> {
        self.bernoulli_mask(n, self.rate)
    }

    /// Mask for the classification head's dropout layer.
    pub fn head_mask<F: Scalar>(&self, n: usize) -> Option<Arc<Vec<F>>> {
        self.bernoulli_mask(n, self.head_rate)
    }

    fn branch_factor(&self) -> Option<f64> {
        if self.drop_path <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.drop_path;
        let mut rng = self.rng.borrow_mut();
        Some(if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
    }
}

fn dropout<F: Scalar>(x: Tensor<F>, drops: Option<&Dropouts>) -> Tensor<F> {
    match drops.and_then(|d| d.feature_mask::<F>(x.numel())) {
        Some(mask) => x.mul_mask(mask),
        None => x,
    }
}

fn drop_path<F: Scalar>(branch: Tensor<F>, drops: Option<&Dropouts>) -> Tensor<F> {
    match drops.and_then(|d| d.branch_factor()) {
        Some(f) => branch.scale(f),
        None => branch,
    }
}

/// Geometry of one attention block, independent of stage bookkeeping.
#[derive(Clone, Copy)]
pub(crate) struct BlockGeom {
    pub channels: usize,
    pub heads: usize,
    pub hidden: usize,
    pub window: usize,
}

/// The encoder: a validated config plus every index plan it needs.
pub struct Encoder {
    pub cfg: SwinConfig,
    patch_idx: Arc<Vec<u32>>,
    rel_idx: Arc<Vec<u32>>,
    stage_plans: Vec<StagePlans>,
    merge_plans: Vec<[Arc<Vec<u32>>; 4]>,
}

struct StagePlans {
    plain: WindowPlan,
    shifted: Option<WindowPlan>,
}

impl Encoder {
    pub fn new(cfg: SwinConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_idx = patch_pixel_index(cfg.image_size, cfg.patch_size);
        let rel_idx = relative_position_index(cfg.window_size);
        let stage_plans = (0..4)
            .map(|s| {
                let grid = cfg.stage_grid(s);
                let plain = WindowPlan::new(grid, cfg.window_size, 0);
                let shifted = (cfg.depths[s] > 1 && cfg.shift() > 0)
                    .then(|| WindowPlan::new(grid, cfg.window_size, cfg.shift()));
                StagePlans { plain, shifted }
            })
            .collect();
        let merge_plans = (0..3).map(|s| merge_indices(cfg.stage_grid(s))).collect();
        Ok(Encoder { cfg, patch_idx, rel_idx, stage_plans, merge_plans })
    }

    /// Register randomly initialized parameters (truncated normal std 0.02,
    /// zero biases, unit layer norms) under the `enc.` prefix. Draw order is
    /// fixed, so a seeded RNG reproduces the same parameters exactly.
    pub fn register_params<F: Scalar, R: Rng>(&self, ps: &mut ParamSet<F>, rng: &mut R) {
        let cfg = &self.cfg;
        let c0 = cfg.embed_dim;
        let in_features = cfg.patch_size * cfg.patch_size * 3;
        ps.insert_trunc_normal("enc.patch.proj.weight", vec![in_features, c0], 0.02, rng);
        ps.insert_zeros("enc.patch.proj.bias", vec![c0]);
        ps.insert_ones("enc.patch.norm.gamma", vec![c0]);
        ps.insert_zeros("enc.patch.norm.beta", vec![c0]);
        for s in 0..4 {
            let geom = self.geom(s);
            for b in 0..cfg.depths[s] {
                register_block_params(ps, &block_prefix(s, b), geom, rng);
            }
            if s < 3 {
                let c = cfg.stage_channels(s);
                let pfx = format!("enc.merge{}", s + 1);
                ps.insert_ones(&format!("{pfx}.norm.gamma"), vec![4 * c]);
                ps.insert_zeros(&format!("{pfx}.norm.beta"), vec![4 * c]);
                ps.insert_trunc_normal(&format!("{pfx}.reduction.weight"), vec![4 * c, 2 * c], 0.02, rng);
            }
        }
    }

    fn geom(&self, s: usize) -> BlockGeom {
        BlockGeom {
            channels: self.cfg.stage_channels(s),
            heads: self.cfg.num_heads[s],
            hidden: self.cfg.mlp_hidden(s),
            window: self.cfg.window_size,
        }
    }

    /// Tokenize a batch of images: linear projection of each non-overlapping
    /// patch plus bias, then layer norm. `images` is `[batch · S², 3]`.
    pub fn patch_embed<F: Scalar>(
        &self,
        images: &Tensor<F>,
        batch: usize,
        leaves: &Leaves<F>,
    ) -> Tensor<F> {
        let cfg = &self.cfg;
        let px = cfg.image_size * cfg.image_size;
        assert_eq!(
            images.shape(),
            &[batch * px, 3],
            "image batch shape mismatch for config"
        );
        let t0 = cfg.stage_tokens(0);
        let p23 = cfg.patch_size * cfg.patch_size * 3;
        let idx = batched_indices(&self.patch_idx, px, batch);
        images
            .gather_rows(idx)
            .reshape(vec![batch * t0, p23])
            .matmul(leaves.get("enc.patch.proj.weight"), false)
            .add_bias(leaves.get("enc.patch.proj.bias"))
            .layer_norm(
                leaves.get("enc.patch.norm.gamma"),
                leaves.get("enc.patch.norm.beta"),
                LN_EPS,
            )
    }

    /// Full forward for a batch of images; returns all four stage outputs.
    pub fn forward<F: Scalar>(
        &self,
        images: &Tensor<F>,
        batch: usize,
        leaves: &Leaves<F>,
        drops: Option<&Dropouts>,
    ) -> Vec<FeatureMap<F>> {
        let cfg = &self.cfg;
        let mut x = self.patch_embed(images, batch, leaves);
        let mut feats = Vec::with_capacity(4);
        for s in 0..4 {
            if s > 0 {
                x = self.patch_merge(&x, s - 1, batch, leaves);
            }
            let geom = self.geom(s);
            let tokens = cfg.stage_tokens(s);
            for b in 0..cfg.depths[s] {
                let plans = &self.stage_plans[s];
                let plan = if b % 2 == 1 {
                    plans.shifted.as_ref().unwrap_or(&plans.plain)
                } else {
                    &plans.plain
                };
                x = block_forward(
                    &x,
                    geom,
                    plan,
                    &self.rel_idx,
                    &block_prefix(s, b),
                    tokens,
                    batch,
                    leaves,
                    drops,
                );
            }
            feats.push(FeatureMap {
                tokens: x.clone(),
                grid: cfg.stage_grid(s),
                stage_index: s + 1,
                batch,
            });
        }
        feats
    }

    /// 2×2 neighborhood concat → layer norm → linear 4C→2C.
    fn patch_merge<F: Scalar>(
        &self,
        x: &Tensor<F>,
        m: usize,
        batch: usize,
        leaves: &Leaves<F>,
    ) -> Tensor<F> {
        let t_in = self.cfg.stage_tokens(m);
        let parts: Vec<Tensor<F>> = self.merge_plans[m]
            .iter()
            .map(|idx| x.gather_rows(batched_indices(idx, t_in, batch)))
            .collect();
        let pfx = format!("enc.merge{}", m + 1);
        Tensor::concat_cols(&parts)
            .layer_norm(
                leaves.get(&format!("{pfx}.norm.gamma")),
                leaves.get(&format!("{pfx}.norm.beta")),
                LN_EPS,
            )
            .matmul(leaves.get(&format!("{pfx}.reduction.weight")), false)
    }
}

fn block_prefix(s: usize, b: usize) -> String {
    format!("enc.s{}.b{:02}.", s + 1, b)
}

pub(crate) fn register_block_params<F: Scalar, R: Rng>(
    ps: &mut ParamSet<F>,
    prefix: &str,
    geom: BlockGeom,
    rng: &mut R,
) {
    let c = geom.channels;
    let span2 = (2 * geom.window - 1) * (2 * geom.window - 1);
    ps.insert_ones(&format!("{prefix}norm1.gamma"), vec![c]);
    ps.insert_zeros(&format!("{prefix}norm1.beta"), vec![c]);
    for w in ["wq", "wk", "wv", "wo"] {
        ps.insert_trunc_normal(&format!("{prefix}attn.{w}"), vec![c, c], 0.02, rng);
    }
    for b in ["bq", "bk", "bv", "bo"] {
        ps.insert_zeros(&format!("{prefix}attn.{b}"), vec![c]);
    }
    ps.insert_trunc_normal(&format!("{prefix}attn.relbias"), vec![span2, geom.heads], 0.02, rng);
    ps.insert_ones(&format!("{prefix}norm2.gamma"), vec![c]);
    ps.insert_zeros(&format!("{prefix}norm2.beta"), vec![c]);
    ps.insert_trunc_normal(&format!("{prefix}mlp.fc1.weight"), vec![c, geom.hidden], 0.02, rng);
    ps.insert_zeros(&format!("{prefix}mlp.fc1.bias"), vec![geom.hidden]);
    ps.insert_trunc_normal(&format!("{prefix}mlp.fc2.weight"), vec![geom.hidden, c], 0.02, rng);
    ps.insert_zeros(&format!("{prefix}mlp.fc2.bias"), vec![c]);
}

/// One transformer block: LN → windowed multi-head attention (+relative bias,
/// +shift mask) → residual, then LN → MLP → residual.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_forward<F: Scalar>(
    x: &Tensor<F>,
    geom: BlockGeom,
    plan: &WindowPlan,
    rel_idx: &Arc<Vec<u32>>,
    prefix: &str,
    tokens_per_image: usize,
    batch: usize,
    leaves: &Leaves<F>,
    drops: Option<&Dropouts>,
) -> Tensor<F> {
    let p = |sfx: &str| format!("{prefix}{sfx}");
    let c = geom.channels;
    let heads = geom.heads;
    let dh = c / heads;
    let ws2 = geom.window * geom.window;
    let nw = batch * plan.num_windows;

    // Attention branch on window-ordered tokens.
    let xn = x.layer_norm(leaves.get(&p("norm1.gamma")), leaves.get(&p("norm1.beta")), LN_EPS);
    let xw = xn.gather_rows(batched_indices(&plan.partition, tokens_per_image, batch));
    let q = xw.matmul(leaves.get(&p("attn.wq")), false).add_bias(leaves.get(&p("attn.bq")));
    let k = xw.matmul(leaves.get(&p("attn.wk")), false).add_bias(leaves.get(&p("attn.bk")));
    let v = xw.matmul(leaves.get(&p("attn.wv")), false).add_bias(leaves.get(&p("attn.bv")));

    let stack = |t: &Tensor<F>| {
        let per_head: Vec<Tensor<F>> = (0..heads)
            .map(|h| t.slice_cols(h * dh, dh).reshape(vec![nw, ws2, dh]))
            .collect();
        Tensor::concat_rows(&per_head) // [heads·nw, ws2, dh], head-major
    };
    let q3 = stack(&q);
    let k3 = stack(&k);
    let v3 = stack(&v);

    let scores = q3.bmm(&k3, true).scale(1.0 / (dh as f64).sqrt());
    let bias = leaves
        .get(&p("attn.relbias"))
        .gather_rows(Arc::clone(rel_idx))
        .transpose2()
        .reshape(vec![heads, ws2, ws2]);
    let scores = scores.add_grouped_bias(&bias, nw);
    let mask = (plan.shift > 0).then(|| SoftmaxMask {
        allow: Arc::clone(&plan.allow),
        row_span: ws2,
        batch_mod: plan.num_windows,
    });
    let attn = scores.softmax_rows(mask);
    let o3 = attn.bmm(&v3, false); // [heads·nw, ws2, dh]

    let heads_out: Vec<Tensor<F>> = (0..heads)
        .map(|h| {
            let rows: Vec<u32> = (h * nw..(h + 1) * nw).map(|i| i as u32).collect();
            o3.gather_rows(Arc::new(rows)).reshape(vec![nw * ws2, dh])
        })
        .collect();
    let ow = Tensor::concat_cols(&heads_out); // window-ordered [B·T, C]
    let o = ow
        .gather_rows(batched_indices(&plan.reverse, tokens_per_image, batch))
        .matmul(leaves.get(&p("attn.wo")), false)
        .add_bias(leaves.get(&p("attn.bo")));
    let o = drop_path(dropout(o, drops), drops);
    let x = x.add(&o);

    // MLP branch.
    let xn2 = x.layer_norm(leaves.get(&p("norm2.gamma")), leaves.get(&p("norm2.beta")), LN_EPS);
    let h = xn2
        .matmul(leaves.get(&p("mlp.fc1.weight")), false)
        .add_bias(leaves.get(&p("mlp.fc1.bias")))
        .gelu();
    let h = dropout(h, drops);
    let h = h
        .matmul(leaves.get(&p("mlp.fc2.weight")), false)
        .add_bias(leaves.get(&p("mlp.fc2.bias")));
    let h = drop_path(dropout(h, drops), drops);
    x.add(&h)
}
