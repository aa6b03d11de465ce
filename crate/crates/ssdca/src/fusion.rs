//! Dual cross-attention fusion and the classification heads.
//!
//! Both directions share one set of projection matrices and one layer-norm
//! affine: features of each image query the other image's keys/values, the
//! per-head results are concatenated (and optionally output-projected), and
//! each branch is fused as `H = LN(F + CA(F))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Leaves, ParamSet};
use crate::swin::{Dropouts, LN_EPS};
use crate::tensor::{Scalar, Tensor};

/// Cross-attention hyperparameters. `heads` must divide the fused channel
/// count; the output projection after head concat is standard attention
/// furniture the source equations omit, so it is a toggle (default on).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub heads: usize,
    pub out_proj: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { heads: 8, out_proj: true }
    }
}

/// Attention matrices captured during a DCA forward, one `[B, T, T]` tensor
/// per head and direction.
pub struct DcaTrace<F: Scalar> {
    pub pre_to_post: Vec<Tensor<F>>,
    pub post_to_pre: Vec<Tensor<F>>,
}

pub fn register_dca_params<F: Scalar, R: Rng>(
    ps: &mut ParamSet<F>,
    channels: usize,
    fcfg: &FusionConfig,
    rng: &mut R,
) {
    for w in ["wq", "wk", "wv"] {
        ps.insert_trunc_normal(&format!("fuse.{w}"), vec![channels, channels], 0.02, rng);
    }
    if fcfg.out_proj {
        ps.insert_trunc_normal("fuse.proj.weight", vec![channels, channels], 0.02, rng);
    }
    ps.insert_ones("fuse.norm.gamma", vec![channels]);
    ps.insert_zeros("fuse.norm.beta", vec![channels]);
}

/// One direction of cross attention: `softmax(q·kᵀ/√Dh)·v` per head over the
/// tokens of each pair, heads concatenated. Inputs are `[B·T, C]`.
fn cross_attend<F: Scalar>(
    q_src: &Tensor<F>,
    kv_src: &Tensor<F>,
    batch: usize,
    tokens: usize,
    heads: usize,
    leaves: &Leaves<F>,
    out_proj: bool,
) -> (Tensor<F>, Vec<Tensor<F>>) {
    let c = *q_src.shape().last().unwrap();
    let dh = c / heads;
    let q = q_src.matmul(leaves.get("fuse.wq"), false);
    let k = kv_src.matmul(leaves.get("fuse.wk"), false);
    let v = kv_src.matmul(leaves.get("fuse.wv"), false);

    let mut attns = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh).reshape(vec![batch, tokens, dh]);
        let kh = k.slice_cols(h * dh, dh).reshape(vec![batch, tokens, dh]);
        let vh = v.slice_cols(h * dh, dh).reshape(vec![batch, tokens, dh]);
        let attn = qh
            .bmm(&kh, true)
            .scale(1.0 / (dh as f64).sqrt())
            .softmax_rows(None); // [B, T, T]
        outs.push(attn.bmm(&vh, false).reshape(vec![batch * tokens, dh]));
        attns.push(attn);
    }
    let mut ca = Tensor::concat_cols(&outs);
    if out_proj {
        ca = ca.matmul(leaves.get("fuse.proj.weight"), false);
    }
    (ca, attns)
}

/// Bidirectional fusion: `H_pre = LN(F_pre + CA(F_pre))`, and symmetrically
/// for the post branch, with all parameters shared between directions.
pub fn dual_cross_attention<F: Scalar>(
    f_pre: &Tensor<F>,
    f_post: &Tensor<F>,
    batch: usize,
    tokens: usize,
    fcfg: &FusionConfig,
    leaves: &Leaves<F>,
) -> (Tensor<F>, Tensor<F>, DcaTrace<F>) {
    assert_eq!(f_pre.shape(), f_post.shape(), "pre/post feature shape mismatch");
    let gamma = leaves.get("fuse.norm.gamma");
    let beta = leaves.get("fuse.norm.beta");
    let (ca_pre, pre_to_post) =
        cross_attend(f_pre, f_post, batch, tokens, fcfg.heads, leaves, fcfg.out_proj);
    let (ca_post, post_to_pre) =
        cross_attend(f_post, f_pre, batch, tokens, fcfg.heads, leaves, fcfg.out_proj);
    let h_pre = f_pre.add(&ca_pre).layer_norm(gamma, beta, LN_EPS);
    let h_post = f_post.add(&ca_post).layer_norm(gamma, beta, LN_EPS);
    (h_pre, h_post, DcaTrace { pre_to_post, post_to_pre })
}

pub fn register_head_params<F: Scalar, R: Rng>(
    ps: &mut ParamSet<F>,
    in_width: usize,
    hidden: usize,
    rng: &mut R,
) {
    ps.insert_trunc_normal("head.fc1.weight", vec![in_width, hidden], 0.02, rng);
    ps.insert_zeros("head.fc1.bias", vec![hidden]);
    ps.insert_trunc_normal("head.fc2.weight", vec![hidden, 1], 0.02, rng);
    ps.insert_zeros("head.fc2.bias", vec![1]);
}

/// Classification head: linear → ReLU → dropout → linear, producing one
/// logit per row of `x` (`[B, in_width]` → `[B, 1]`).
pub fn head_forward<F: Scalar>(
    x: &Tensor<F>,
    leaves: &Leaves<F>,
    drops: Option<&Dropouts>,
) -> Tensor<F> {
    let h = x
        .matmul(leaves.get("head.fc1.weight"), false)
        .add_bias(leaves.get("head.fc1.bias"))
        .relu();
    let h = match drops.and_then(|d| d.head_mask::<F>(h.numel())) {
        Some(mask) => h.mul_mask(mask),
        None => h,
    };
    h.matmul(leaves.get("head.fc2.weight"), false)
        .add_bias(leaves.get("head.fc2.bias"))
}

/// Global average pool per image then concat pre‖post: `[B·T, C]` × 2 →
/// `[B, 2C]`.
pub fn gap_concat<F: Scalar>(h_pre: &Tensor<F>, h_post: &Tensor<F>, tokens: usize) -> Tensor<F> {
    let g_pre = h_pre.mean_rows_grouped(tokens);
    let g_post = h_post.mean_rows_grouped(tokens);
    Tensor::concat_cols(&[g_pre, g_post])
}

/// Invert a probability back to its logit (finite for p ∈ (0,1)).
pub fn logit_of(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    use crate::tensor::{l2_relative_error, numeric_gradient, sigmoid};

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()
    }

    fn dca_params(c: usize, fcfg: &FusionConfig, seed: u64) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_dca_params(&mut ps, c, fcfg, &mut rng);
        ps
    }

    #[test]
    fn mirror_swap_and_identity_over_random_instances() {
        let (t, c) = (6usize, 16usize);
        let fcfg = FusionConfig { heads: 4, out_proj: true };
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for trial in 0..100 {
            let ps = dca_params(c, &fcfg, 1000 + trial);
            let leaves = ps.leaves(false);
            let a = Tensor::<f32>::from_f64_slice(&rand_vec(&mut rng, t * c), vec![t, c]);
            let b = Tensor::<f32>::from_f64_slice(&rand_vec(&mut rng, t * c), vec![t, c]);
            let (h_pre, h_post, _) = dual_cross_attention(&a, &b, 1, t, &fcfg, &leaves);
            let (s_pre, s_post, _) = dual_cross_attention(&b, &a, 1, t, &fcfg, &leaves);
            let max_dev = h_pre
                .values()
                .iter()
                .zip(s_post.values().iter())
                .chain(h_post.values().iter().zip(s_pre.values().iter()))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_dev <= 1e-5, "trial {trial}: mirror deviation {max_dev}");

            // Identical inputs on both branches give identical outputs.
            let (i_pre, i_post, _) = dual_cross_attention(&a, &a, 1, t, &fcfg, &leaves);
            assert_eq!(**i_pre.values(), **i_post.values());
        }
    }

    #[test]
    fn ca_is_invariant_to_joint_post_token_permutation() {
        let (t, c) = (4usize, 8usize);
        let fcfg = FusionConfig { heads: 2, out_proj: true };
        let ps = dca_params(c, &fcfg, 50).cast::<f64>();
        let leaves = ps.leaves(false);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let pre = Tensor::<f64>::from_f64_slice(&rand_vec(&mut rng, t * c), vec![t, c]);
        let post_v = rand_vec(&mut rng, t * c);
        let post = Tensor::<f64>::from_f64_slice(&post_v, vec![t, c]);

        let perm = [2usize, 0, 3, 1];
        let mut post_p = vec![0.0; t * c];
        for (dst, &src) in perm.iter().enumerate() {
            post_p[dst * c..(dst + 1) * c].copy_from_slice(&post_v[src * c..(src + 1) * c]);
        }
        let post_p = Tensor::<f64>::from_f64_slice(&post_p, vec![t, c]);

        let (h1, _, _) = dual_cross_attention(&pre, &post, 1, t, &fcfg, &leaves);
        let (h2, _, _) = dual_cross_attention(&pre, &post_p, 1, t, &fcfg, &leaves);
        let max_dev = h1
            .values()
            .iter()
            .zip(h2.values().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev <= 1e-10, "permutation deviation {max_dev}");
    }

    #[test]
    fn fused_tokens_are_normalized_before_affine() {
        // Fresh params have gamma=1, beta=0, so H itself shows the
        // normalization: every token row has mean 0, variance 1.
        let (t, c) = (5usize, 24usize);
        let fcfg = FusionConfig::default();
        let ps = dca_params(c, &fcfg, 60);
        let leaves = ps.leaves(false);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        // Unit-scale tokens, the regime the encoder actually produces.
        let scaled =
            |rng: &mut ChaCha8Rng| rand_vec(rng, t * c).iter().map(|v| 3.0 * v).collect::<Vec<_>>();
        let a = Tensor::<f32>::from_f64_slice(&scaled(&mut rng), vec![t, c]);
        let b = Tensor::<f32>::from_f64_slice(&scaled(&mut rng), vec![t, c]);
        let (h_pre, h_post, _) = dual_cross_attention(&a, &b, 1, t, &fcfg, &leaves);
        for h in [&h_pre, &h_post] {
            for row in h.to_f64_vec().chunks(c) {
                let mean: f64 = row.iter().sum::<f64>() / c as f64;
                let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                assert!(mean.abs() <= 1e-5, "token mean {mean}");
                assert!((var - 1.0).abs() <= 1e-5, "token variance {var}");
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (t, c) = (7usize, 16usize);
        let fcfg = FusionConfig { heads: 4, out_proj: false };
        let ps = dca_params(c, &fcfg, 70);
        let leaves = ps.leaves(false);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..100 {
            let a = Tensor::<f32>::from_f64_slice(&rand_vec(&mut rng, t * c), vec![t, c]);
            let b = Tensor::<f32>::from_f64_slice(&rand_vec(&mut rng, t * c), vec![t, c]);
            let (_, _, trace) = dual_cross_attention(&a, &b, 1, t, &fcfg, &leaves);
            for attn in trace.pre_to_post.iter().chain(&trace.post_to_pre) {
                for row in attn.to_f64_vec().chunks(t) {
                    assert!(row.iter().all(|&w| w >= 0.0));
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
                }
            }
        }
    }

    #[test]
    fn gradient_check_dca_plus_head() {
        let (t, c, hidden) = (4usize, 8usize, 8usize);
        let fcfg = FusionConfig { heads: 2, out_proj: true };
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        register_dca_params(&mut ps, c, &fcfg, &mut rng);
        register_head_params(&mut ps, 2 * c, hidden, &mut rng);
        let pre0 = rand_vec(&mut rng, t * c);
        let post0 = rand_vec(&mut rng, t * c);

        let names: Vec<String> = ps.names().cloned().collect();
        let eval = |ps: &ParamSet<f64>, pre: &[f64], post: &[f64], grad: bool| -> (f64, Vec<f64>) {
            let leaves = ps.leaves(grad);
            let a = Tensor::<f64>::leaf(Arc::new(pre.to_vec()), vec![t, c], grad);
            let b = Tensor::<f64>::leaf(Arc::new(post.to_vec()), vec![t, c], grad);
            let (h_pre, h_post, _) = dual_cross_attention(&a, &b, 1, t, &fcfg, &leaves);
            let emb = gap_concat(&h_pre, &h_post, t);
            let logit = head_forward(&emb, &leaves, None);
            let loss = logit.bce_with_logits_mean(&[1.0]);
            if !grad {
                return (loss.item(), Vec::new());
            }
            loss.backward();
            let mut g = Vec::new();
            for n in &names {
                g.extend(
                    leaves
                        .get(n)
                        .grad()
                        .unwrap_or_else(|| vec![0.0; ps.get(n).unwrap().values.len()]),
                );
            }
            g.extend(a.grad().unwrap());
            g.extend(b.grad().unwrap());
            (loss.item(), g)
        };

        let (_, analytic) = eval(&ps, &pre0, &post0, true);
        let mut flat: Vec<f64> = Vec::new();
        for n in &names {
            flat.extend(ps.get(n).unwrap().values.iter());
        }
        flat.extend_from_slice(&pre0);
        flat.extend_from_slice(&post0);

        let numeric = numeric_gradient(
            |probe| {
                let mut off = 0;
                for n in &names {
                    let len = ps.get(n).unwrap().values.len();
                    ps.set_values(n, probe[off..off + len].to_vec());
                    off += len;
                }
                let pre = &probe[off..off + t * c];
                let post = &probe[off + t * c..];
                eval(&ps, pre, post, false).0
            },
            &flat,
            1e-5,
        );
        let err = l2_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "DCA+head gradient relative error {err}");
    }

    #[test]
    fn head_behaviors() {
        let (c, hidden) = (6usize, 4usize);
        let mut ps = ParamSet::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        register_head_params(&mut ps, 2 * c, hidden, &mut rng);

        // GAP of constant branches concatenates the two constants.
        let h_pre = Tensor::<f32>::from_f64_slice(&vec![0.25; 3 * c], vec![3, c]);
        let h_post = Tensor::<f32>::from_f64_slice(&vec![-0.5; 3 * c], vec![3, c]);
        let emb = gap_concat(&h_pre, &h_post, 3);
        let want: Vec<f32> = (0..2 * c).map(|i| if i < c { 0.25 } else { -0.5 }).collect();
        assert_eq!(**emb.values(), want);

        // Zero head → probability exactly 1/2.
        let mut zero = ParamSet::<f32>::new();
        for (name, p) in ps.iter() {
            zero.insert(name, vec![0.0; p.values.len()], p.shape.clone());
        }
        let logit = head_forward(&emb, &zero.leaves(false), None);
        assert_eq!(logit.item(), 0.0);
        assert_eq!(sigmoid(logit.item() as f64), 0.5);

        // Concat order matters: swapping branches changes the logit.
        let leaves = ps.leaves(false);
        let fwd = head_forward(&gap_concat(&h_pre, &h_post, 3), &leaves, None);
        let rev = head_forward(&gap_concat(&h_post, &h_pre, 3), &leaves, None);
        assert_ne!(fwd.item(), rev.item());
    }

    #[test]
    fn sigmoid_logit_roundtrip() {
        for i in -100..=100 {
            let z = i as f64 / 10.0;
            let p = sigmoid(z);
            assert!((logit_of(p) - z).abs() <= 1e-6, "logit {z}");
        }
    }
}
