//! The three classifier variants over one shared encoder:
//!
//! * `ssdca`  — Siamese encoder, dual cross-attention fusion at a chosen
//!   stage, GAP/concat head (the primary model);
//! * `ssfc`   — Siamese encoder, direct GAP/concat of the stage features
//!   (no cross-attention);
//! * `single` — one encoder pass over the first image only, GAP of stage-4
//!   features into a half-width head.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::{
    dual_cross_attention, gap_concat, head_forward, register_dca_params, register_head_params,
    DcaTrace, FusionConfig,
};
use crate::params::{Leaves, ParamSet};
use crate::swin::{Dropouts, Encoder, FeatureMap, SwinConfig};
use crate::tensor::{sigmoid, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ssdca,
    Ssfc,
    Single,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Ssdca => "ssdca",
            Variant::Ssfc => "ssfc",
            Variant::Single => "single",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ssdca" => Ok(Variant::Ssdca),
            "ssfc" => Ok(Variant::Ssfc),
            "single" => Ok(Variant::Single),
            other => Err(Error::config(format!(
                "unknown variant `{other}` (expected ssdca, ssfc, or single)"
            ))),
        }
    }

    pub fn uses_pair(&self) -> bool {
        !matches!(self, Variant::Single)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: SwinConfig,
    pub variant: Variant,
    /// Encoder stage whose features feed the fusion/head, 1..=4.
    pub fusion_stage: usize,
    pub fusion: FusionConfig,
    pub head_hidden: usize,
    pub head_dropout: f64,
}

impl ModelConfig {
    pub fn new(encoder: SwinConfig, variant: Variant) -> Self {
        ModelConfig {
            encoder,
            variant,
            fusion_stage: 4,
            fusion: FusionConfig::default(),
            head_hidden: 256,
            head_dropout: 0.2,
        }
    }
}

/// Everything captured during one forward pass, for the loss, the embedding
/// export, GradCAM, and the attention maps.
pub struct ForwardTrace<F: Scalar> {
    /// One logit per pair (or image), `[B, 1]`.
    pub logits: Tensor<F>,
    /// Head input (GAP/concat output), `[B, head_width]`.
    pub embedding: Tensor<F>,
    /// All four stage outputs of the first/only branch.
    pub stages_pre: Vec<FeatureMap<F>>,
    /// Stage outputs of the post branch (pair variants only).
    pub stages_post: Option<Vec<FeatureMap<F>>>,
    /// Fused features H_pre / H_post (ssdca only).
    pub fused_pre: Option<Tensor<F>>,
    pub fused_post: Option<Tensor<F>>,
    /// Per-head cross-attention matrices (ssdca only).
    pub dca: Option<DcaTrace<F>>,
}

impl<F: Scalar> ForwardTrace<F> {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.to_f64_vec().into_iter().map(sigmoid).collect()
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if !(1..=4).contains(&cfg.fusion_stage) {
            return Err(Error::config(format!(
                "fusion_stage must be 1..=4, got {}",
                cfg.fusion_stage
            )));
        }
        if cfg.head_hidden == 0 {
            return Err(Error::config("head_hidden must be nonzero"));
        }
        if !(0.0..1.0).contains(&cfg.head_dropout) {
            return Err(Error::config("head_dropout must lie in [0,1)"));
        }
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let model = Model { cfg, encoder };
        if model.cfg.variant == Variant::Ssdca {
            let c = model.fusion_channels();
            if model.cfg.fusion.heads == 0 || c % model.cfg.fusion.heads != 0 {
                return Err(Error::config(format!(
                    "fusion channels {c} not divisible by fusion heads {}",
                    model.cfg.fusion.heads
                )));
            }
        }
        Ok(model)
    }

    /// Channel width of the features entering the fusion/head. The single
    /// image baseline always reads stage 4.
    pub fn fusion_channels(&self) -> usize {
        let stage = match self.cfg.variant {
            Variant::Single => 4,
            _ => self.cfg.fusion_stage,
        };
        self.cfg.encoder.stage_channels(stage - 1)
    }

    pub fn fusion_tokens(&self) -> usize {
        let stage = match self.cfg.variant {
            Variant::Single => 4,
            _ => self.cfg.fusion_stage,
        };
        self.cfg.encoder.stage_tokens(stage - 1)
    }

    /// Width of the head input: 2C for pair variants, C for single.
    pub fn head_input_width(&self) -> usize {
        if self.cfg.variant.uses_pair() {
            2 * self.fusion_channels()
        } else {
            self.fusion_channels()
        }
    }

    pub fn register_params<F: Scalar, R: Rng>(&self, ps: &mut ParamSet<F>, rng: &mut R) {
        self.encoder.register_params(ps, rng);
        if self.cfg.variant == Variant::Ssdca {
            register_dca_params(ps, self.fusion_channels(), &self.cfg.fusion, rng);
        }
        register_head_params(ps, self.head_input_width(), self.cfg.head_hidden, rng);
    }

    /// Fresh truncated-normal initialization, reproducible from the seed.
    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamSet<F> {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.register_params(&mut ps, &mut rng);
        ps
    }

    /// Stochastic regularizers for training mode, seeded.
    pub fn dropouts(&self, seed: u64) -> Dropouts {
        Dropouts::new(
            self.cfg.encoder.dropout_rate,
            self.cfg.encoder.drop_path_rate,
            self.cfg.head_dropout,
            seed,
        )
    }

    /// Forward a batch. Pair variants need `post`; the single-image baseline
    /// ignores it (it reads only the first/restaging image of each pair).
    pub fn forward<F: Scalar>(
        &self,
        pre: &Tensor<F>,
        post: Option<&Tensor<F>>,
        batch: usize,
        leaves: &Leaves<F>,
        drops: Option<&Dropouts>,
    ) -> Result<ForwardTrace<F>> {
        match self.cfg.variant {
            Variant::Single => self.forward_single(pre, batch, leaves, drops),
            _ => {
                let post = post.ok_or_else(|| {
                    Error::shape("pair variant requires both images of the pair")
                })?;
                self.forward_pair(pre, post, batch, leaves, drops)
            }
        }
    }

    fn forward_pair<F: Scalar>(
        &self,
        pre: &Tensor<F>,
        post: &Tensor<F>,
        batch: usize,
        leaves: &Leaves<F>,
        drops: Option<&Dropouts>,
    ) -> Result<ForwardTrace<F>> {
        if pre.shape() != post.shape() {
            return Err(Error::shape(format!(
                "pre/post image batch shapes differ: {:?} vs {:?}",
                pre.shape(),
                post.shape()
            )));
        }
        // One encoder pass over pre followed by post images keeps the GEMMs
        // large; stage features are then split back into the two branches.
        let joint_images = Tensor::concat_rows(&[pre.clone(), post.clone()]);
        let joint = self.encoder.forward(&joint_images, 2 * batch, leaves, drops);

        let split = |fm: &FeatureMap<F>| -> (FeatureMap<F>, FeatureMap<F>) {
            let rows = batch * fm.tokens_per_image();
            let pre_idx: Vec<u32> = (0..rows as u32).collect();
            let post_idx: Vec<u32> = (rows as u32..2 * rows as u32).collect();
            let mk = |tokens: Tensor<F>| FeatureMap {
                tokens,
                grid: fm.grid,
                stage_index: fm.stage_index,
                batch,
            };
            (
                mk(fm.tokens.gather_rows(Arc::new(pre_idx))),
                mk(fm.tokens.gather_rows(Arc::new(post_idx))),
            )
        };
        let mut stages_pre = Vec::with_capacity(4);
        let mut stages_post = Vec::with_capacity(4);
        for fm in &joint {
            let (p, q) = split(fm);
            stages_pre.push(p);
            stages_post.push(q);
        }

        let s = self.cfg.fusion_stage - 1;
        let tokens = self.cfg.encoder.stage_tokens(s);
        let f_pre = &stages_pre[s].tokens;
        let f_post = &stages_post[s].tokens;

        let (embedding, fused_pre, fused_post, dca) = match self.cfg.variant {
            Variant::Ssdca => {
                let (h_pre, h_post, trace) =
                    dual_cross_attention(f_pre, f_post, batch, tokens, &self.cfg.fusion, leaves);
                let emb = gap_concat(&h_pre, &h_post, tokens);
                (emb, Some(h_pre), Some(h_post), Some(trace))
            }
            Variant::Ssfc => (gap_concat(f_pre, f_post, tokens), None, None, None),
            Variant::Single => unreachable!(),
        };
        let logits = head_forward(&embedding, leaves, drops);
        Ok(ForwardTrace {
            logits,
            embedding,
            stages_pre,
            stages_post: Some(stages_post),
            fused_pre,
            fused_post,
            dca,
        })
    }

    fn forward_single<F: Scalar>(
        &self,
        images: &Tensor<F>,
        batch: usize,
        leaves: &Leaves<F>,
        drops: Option<&Dropouts>,
    ) -> Result<ForwardTrace<F>> {
        let stages = self.encoder.forward(images, batch, leaves, drops);
        let s4 = &stages[3];
        let embedding = s4.tokens.mean_rows_grouped(s4.tokens_per_image());
        let logits = head_forward(&embedding, leaves, drops);
        Ok(ForwardTrace {
            logits,
            embedding,
            stages_pre: stages,
            stages_post: None,
            fused_pre: None,
            fused_post: None,
            dca: None,
        })
    }
}
