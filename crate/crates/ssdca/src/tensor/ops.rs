//! Forward ops with their backward closures.
//!
//! Layout convention: all buffers are dense row-major; the trailing dimension
//! is always the channel/feature axis.

use std::sync::Arc;

use super::{Scalar, Tensor};

/// C(m×n) = alpha · A(m×k) · B(k×n) + beta · C. `trans_*` means the operand
/// buffer is stored transposed, i.e. `a` holds a k×m row-major matrix.
#[allow(clippy::too_many_arguments)]
fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    beta: F,
    c: &mut [F],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Boolean mask for [`Tensor::softmax_rows`]. `allow` is a flattened
/// `[batch_mod, rows_per_batch, row_span]` array of 0/1 flags; batch index
/// `b` of the input maps to mask batch `b % batch_mod`. Disallowed positions
/// get exactly zero weight; a fully masked row yields an all-zero row.
#[derive(Clone)]
pub struct SoftmaxMask {
    pub allow: Arc<Vec<u8>>,
    pub row_span: usize,
    pub batch_mod: usize,
}

impl<F: Scalar> Tensor<F> {
    /// 2-D matrix product. `self` is m×k; `other` is k×n, or n×k when
    /// `trans_other` is set.
    pub fn matmul(&self, other: &Tensor<F>, trans_other: bool) -> Tensor<F> {
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = if trans_other { other.shape()[0] } else { other.shape()[1] };
        let k2 = if trans_other { other.shape()[1] } else { other.shape()[0] };
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![F::ZERO; m * n];
        gemm(
            m, k, n, F::ONE,
            self.values(), false,
            other.values(), trans_other,
            F::ZERO, &mut out,
        );
        let a = self.clone();
        let b = other.clone();
        let (av, bv) = (Arc::clone(self.values()), Arc::clone(other.values()));
        Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |dy| {
                if a.needs_grad() {
                    let mut da = vec![F::ZERO; m * k];
                    if trans_other {
                        // y = a·bᵀ  =>  da = dy·b
                        gemm(m, n, k, F::ONE, dy, false, &bv, false, F::ZERO, &mut da);
                    } else {
                        // da = dy·bᵀ
                        gemm(m, n, k, F::ONE, dy, false, &bv, true, F::ZERO, &mut da);
                    }
                    a.accumulate_grad(&da);
                }
                if b.needs_grad() {
                    if trans_other {
                        // db = dyᵀ·a  (shape n×k)
                        let mut db = vec![F::ZERO; n * k];
                        gemm(n, m, k, F::ONE, dy, true, &av, false, F::ZERO, &mut db);
                        b.accumulate_grad(&db);
                    } else {
                        // db = aᵀ·dy  (shape k×n)
                        let mut db = vec![F::ZERO; k * n];
                        gemm(k, m, n, F::ONE, &av, true, dy, false, F::ZERO, &mut db);
                        b.accumulate_grad(&db);
                    }
                }
            }),
        )
    }

    /// Batched matmul over the leading axis: `self` is [B,m,k], `other` is
    /// [B,k,n] (or [B,n,k] with `trans_other`).
    pub fn bmm(&self, other: &Tensor<F>, trans_other: bool) -> Tensor<F> {
        assert_eq!(self.shape().len(), 3, "bmm lhs must be 3-D");
        assert_eq!(other.shape().len(), 3, "bmm rhs must be 3-D");
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        assert_eq!(bs, other.shape()[0], "bmm batch mismatch");
        let n = if trans_other { other.shape()[1] } else { other.shape()[2] };
        let k2 = if trans_other { other.shape()[2] } else { other.shape()[1] };
        assert_eq!(k, k2, "bmm inner dims {k} vs {k2}");
        let mut out = vec![F::ZERO; bs * m * n];
        {
            let av = self.values();
            let bvv = other.values();
            let bk = if trans_other { n * k } else { k * n };
            for i in 0..bs {
                gemm(
                    m, k, n, F::ONE,
                    &av[i * m * k..(i + 1) * m * k], false,
                    &bvv[i * bk..(i + 1) * bk], trans_other,
                    F::ZERO,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let a = self.clone();
        let b = other.clone();
        let (av, bv) = (Arc::clone(self.values()), Arc::clone(other.values()));
        Tensor::from_op(
            out,
            vec![bs, m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |dy| {
                let bk = if trans_other { n * k } else { k * n };
                if a.needs_grad() {
                    let mut da = vec![F::ZERO; bs * m * k];
                    for i in 0..bs {
                        let dyi = &dy[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * bk..(i + 1) * bk];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if trans_other {
                            gemm(m, n, k, F::ONE, dyi, false, bi, false, F::ZERO, dai);
                        } else {
                            gemm(m, n, k, F::ONE, dyi, false, bi, true, F::ZERO, dai);
                        }
                    }
                    a.accumulate_grad(&da);
                }
                if b.needs_grad() {
                    let mut db = vec![F::ZERO; bs * bk];
                    for i in 0..bs {
                        let dyi = &dy[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * bk..(i + 1) * bk];
                        if trans_other {
                            gemm(n, m, k, F::ONE, dyi, true, ai, false, F::ZERO, dbi);
                        } else {
                            gemm(k, m, n, F::ONE, ai, true, dyi, false, F::ZERO, dbi);
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }),
        )
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let out: Vec<F> = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |dy| {
                a.accumulate_grad(dy);
                b.accumulate_grad(dy);
            }),
        )
    }

    /// Broadcast-add a bias over the trailing axis: x[..., C] + b[C].
    pub fn add_bias(&self, bias: &Tensor<F>) -> Tensor<F> {
        let c = *self.shape().last().unwrap();
        assert_eq!(bias.numel(), c, "bias length mismatch");
        let bv = bias.values();
        let out: Vec<F> = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % c])
            .collect();
        let (a, b) = (self.clone(), bias.clone());
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |dy| {
                a.accumulate_grad(dy);
                if b.needs_grad() {
                    let mut db = vec![F::ZERO; c];
                    for (i, &g) in dy.iter().enumerate() {
                        db[i % c] += g;
                    }
                    b.accumulate_grad(&db);
                }
            }),
        )
    }

    /// x[G·group, R, C] + bias[G, R, C], where batch b uses bias row b/group.
    /// Used to add per-head relative-position bias across all windows.
    pub fn add_grouped_bias(&self, bias: &Tensor<F>, group: usize) -> Tensor<F> {
        assert_eq!(self.shape().len(), 3);
        assert_eq!(bias.shape().len(), 3);
        let (bt, r, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let g = bias.shape()[0];
        assert_eq!(bt, g * group, "grouped bias batch mismatch");
        assert_eq!(&bias.shape()[1..], &[r, c]);
        let span = r * c;
        let bv = bias.values();
        let mut out = self.values().to_vec();
        for batch in 0..bt {
            let bi = batch / group;
            let dst = &mut out[batch * span..(batch + 1) * span];
            let src = &bv[bi * span..(bi + 1) * span];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let (a, b) = (self.clone(), bias.clone());
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |dy| {
                a.accumulate_grad(dy);
                if b.needs_grad() {
                    let mut db = vec![F::ZERO; g * span];
                    for batch in 0..bt {
                        let bi = batch / group;
                        let dst = &mut db[bi * span..(bi + 1) * span];
                        let src = &dy[batch * span..(batch + 1) * span];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }),
        )
    }

    pub fn scale(&self, factor: f64) -> Tensor<F> {
        let f = F::from_f64(factor);
        let out: Vec<F> = self.values().iter().map(|&x| x * f).collect();
        let a = self.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |dy| {
                let da: Vec<F> = dy.iter().map(|&g| g * f).collect();
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Elementwise product with a constant mask (dropout, stochastic depth).
    pub fn mul_mask(&self, mask: Arc<Vec<F>>) -> Tensor<F> {
        assert_eq!(self.numel(), mask.len(), "mask length mismatch");
        let out: Vec<F> = self
            .values()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let a = self.clone();
        let mk = Arc::clone(&mask);
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |dy| {
                let da: Vec<F> = dy.iter().zip(mk.iter()).map(|(&g, &m)| g * m).collect();
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Select rows (axis 0) by index; trailing dims carry over. Gradient is
    /// scatter-added, so repeated indices are fine.
    pub fn gather_rows(&self, idx: Arc<Vec<u32>>) -> Tensor<F> {
        let rows = self.shape()[0];
        let span: usize = self.shape()[1..].iter().product();
        let v = self.values();
        let mut out = Vec::with_capacity(idx.len() * span);
        for &i in idx.iter() {
            let i = i as usize;
            assert!(i < rows, "gather index {i} out of range {rows}");
            out.extend_from_slice(&v[i * span..(i + 1) * span]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.shape()[1..]);
        let a = self.clone();
        let ix = Arc::clone(&idx);
        let total = self.numel();
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |dy| {
                let mut da = vec![F::ZERO; total];
                for (o, &i) in ix.iter().enumerate() {
                    let dst = &mut da[i as usize * span..(i as usize + 1) * span];
                    let src = &dy[o * span..(o + 1) * span];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Slice a contiguous range of the trailing axis.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor<F> {
        let c = *self.shape().last().unwrap();
        assert!(start + len <= c, "column slice out of range");
        let rows = self.numel() / c;
        let v = self.values();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * c + start..r * c + start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let a = self.clone();
        let total = self.numel();
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |dy| {
                let mut da = vec![F::ZERO; total];
                for r in 0..rows {
                    da[r * c + start..r * c + start + len]
                        .copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Concatenate along the trailing axis; all parts share leading dims.
    pub fn concat_cols(parts: &[Tensor<F>]) -> Tensor<F> {
        assert!(!parts.is_empty());
        let c0 = *parts[0].shape().last().unwrap();
        let rows = parts[0].numel() / c0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let c = *p.shape().last().unwrap();
                assert_eq!(p.numel() / c, rows, "concat_cols row mismatch");
                c
            })
            .collect();
        let total_c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total_c);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                let v = p.values();
                out.extend_from_slice(&v[r * w..(r + 1) * w]);
            }
        }
        let mut shape = parts[0].shape().to_vec();
        *shape.last_mut().unwrap() = total_c;
        let handles: Vec<Tensor<F>> = parts.to_vec();
        let widths_c = widths.clone();
        let back_handles = handles.clone();
        Tensor::from_op(
            out,
            shape,
            handles,
            Box::new(move |dy| {
                let mut offset = 0usize;
                for (p, &w) in back_handles.iter().zip(&widths_c) {
                    if p.needs_grad() {
                        let mut dp = vec![F::ZERO; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&dy[r * total_c + offset..r * total_c + offset + w]);
                        }
                        p.accumulate_grad(&dp);
                    }
                    offset += w;
                }
            }),
        )
    }

    /// Concatenate along axis 0; all parts share trailing dims.
    pub fn concat_rows(parts: &[Tensor<F>]) -> Tensor<F> {
        assert!(!parts.is_empty());
        let trailing = &parts[0].shape()[1..];
        let mut out = Vec::new();
        let mut rows0 = 0usize;
        for p in parts {
            assert_eq!(&p.shape()[1..], trailing, "concat_rows trailing mismatch");
            rows0 += p.shape()[0];
            out.extend_from_slice(p.values());
        }
        let mut shape = vec![rows0];
        shape.extend_from_slice(trailing);
        let handles: Vec<Tensor<F>> = parts.to_vec();
        let back_handles = handles.clone();
        Tensor::from_op(
            out,
            shape,
            handles,
            Box::new(move |dy| {
                let mut offset = 0usize;
                for p in &back_handles {
                    let n = p.numel();
                    if p.needs_grad() {
                        p.accumulate_grad(&dy[offset..offset + n]);
                    }
                    offset += n;
                }
            }),
        )
    }

    /// Layer normalization over the trailing axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Tensor<F> {
        let c = *self.shape().last().unwrap();
        assert_eq!(gamma.numel(), c);
        assert_eq!(beta.numel(), c);
        let rows = self.numel() / c;
        let v = self.values();
        let gv = gamma.values();
        let bv = beta.values();
        let epsf = F::from_f64(eps);
        let inv_c = F::from_f64(1.0 / c as f64);
        let mut out = vec![F::ZERO; rows * c];
        let mut xhat = vec![F::ZERO; rows * c];
        let mut inv_std = vec![F::ZERO; rows];
        for r in 0..rows {
            let x = &v[r * c..(r + 1) * c];
            let mean = x.iter().copied().sum::<F>() * inv_c;
            let var = x
                .iter()
                .map(|&a| (a - mean) * (a - mean))
                .sum::<F>()
                * inv_c;
            let istd = F::ONE / (var + epsf).sqrt();
            inv_std[r] = istd;
            for i in 0..c {
                let h = (x[i] - mean) * istd;
                xhat[r * c + i] = h;
                out[r * c + i] = gv[i] * h + bv[i];
            }
        }
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        let a = self.clone();
        let g = gamma.clone();
        let b = beta.clone();
        let gv2 = Arc::clone(gamma.values());
        let xh = Arc::clone(&xhat);
        let istds = Arc::clone(&inv_std);
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |dy| {
                if g.needs_grad() {
                    let mut dg = vec![F::ZERO; c];
                    for r in 0..rows {
                        for i in 0..c {
                            dg[i] += dy[r * c + i] * xh[r * c + i];
                        }
                    }
                    g.accumulate_grad(&dg);
                }
                if b.needs_grad() {
                    let mut db = vec![F::ZERO; c];
                    for r in 0..rows {
                        for i in 0..c {
                            db[i] += dy[r * c + i];
                        }
                    }
                    b.accumulate_grad(&db);
                }
                if a.needs_grad() {
                    let inv_c = F::from_f64(1.0 / c as f64);
                    let mut da = vec![F::ZERO; rows * c];
                    for r in 0..rows {
                        let mut mean_gdy = F::ZERO;
                        let mut mean_gdy_xhat = F::ZERO;
                        for i in 0..c {
                            let gdy = gv2[i] * dy[r * c + i];
                            mean_gdy += gdy;
                            mean_gdy_xhat += gdy * xh[r * c + i];
                        }
                        mean_gdy = mean_gdy * inv_c;
                        mean_gdy_xhat = mean_gdy_xhat * inv_c;
                        for i in 0..c {
                            let gdy = gv2[i] * dy[r * c + i];
                            da[r * c + i] =
                                (gdy - mean_gdy - xh[r * c + i] * mean_gdy_xhat) * istds[r];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    /// Row softmax over the trailing axis, with optional boolean masking.
    /// Masked positions contribute exactly zero; fully masked rows come out
    /// all-zero instead of NaN.
    pub fn softmax_rows(&self, mask: Option<SoftmaxMask>) -> Tensor<F> {
        let c = *self.shape().last().unwrap();
        let rows = self.numel() / c;
        let rows_per_batch = if self.shape().len() >= 3 {
            self.shape()[self.shape().len() - 2]
        } else {
            rows
        };
        if let Some(m) = &mask {
            assert_eq!(m.row_span, c, "mask row span mismatch");
            assert_eq!(
                m.allow.len(),
                m.batch_mod * rows_per_batch * c,
                "mask size mismatch"
            );
        }
        let v = self.values();
        let mut out = vec![F::ZERO; rows * c];
        let allow_at = |gr: usize, i: usize, m: &SoftmaxMask| -> bool {
            let batch = gr / rows_per_batch;
            let r = gr % rows_per_batch;
            m.allow[((batch % m.batch_mod) * rows_per_batch + r) * c + i] != 0
        };
        for gr in 0..rows {
            let x = &v[gr * c..(gr + 1) * c];
            let mut maxv: Option<F> = None;
            for (i, &xi) in x.iter().enumerate() {
                let ok = mask.as_ref().map_or(true, |m| allow_at(gr, i, m));
                if ok && maxv.map_or(true, |m| xi > m) {
                    maxv = Some(xi);
                }
            }
            let Some(maxv) = maxv else { continue }; // fully masked row -> zeros
            let mut sum = F::ZERO;
            for (i, &xi) in x.iter().enumerate() {
                let ok = mask.as_ref().map_or(true, |m| allow_at(gr, i, m));
                if ok {
                    let e = (xi - maxv).exp();
                    out[gr * c + i] = e;
                    sum += e;
                }
            }
            let inv = F::ONE / sum;
            for i in 0..c {
                out[gr * c + i] = out[gr * c + i] * inv;
            }
        }
        let y = Arc::new(out);
        let a = self.clone();
        let yv = Arc::clone(&y);
        Tensor::from_view(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |dy| {
                // dx = y ⊙ (dy − Σ_j y_j dy_j); zero rows propagate zeros.
                let mut da = vec![F::ZERO; rows * c];
                for gr in 0..rows {
                    let yr = &yv[gr * c..(gr + 1) * c];
                    let dyr = &dy[gr * c..(gr + 1) * c];
                    let dot: F = yr.iter().zip(dyr).map(|(&yj, &gj)| yj * gj).sum();
                    for i in 0..c {
                        da[gr * c + i] = yr[i] * (dyr[i] - dot);
                    }
                }
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor<F> {
        let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let half = F::from_f64(0.5);
        let out: Vec<F> = self
            .values()
            .iter()
            .map(|&x| half * x * (F::ONE + (x * inv_sqrt2).erf()))
            .collect();
        let a = self.clone();
        let xv = Arc::clone(self.values());
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |dy| {
                let inv_sqrt_2pi = F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let da: Vec<F> = xv
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| {
                        let cdf = half * (F::ONE + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                        g * (cdf + x * pdf)
                    })
                    .collect();
                a.accumulate_grad(&da);
            }),
        )
    }

    pub fn relu(&self) -> Tensor<F> {
        let out: Vec<F> = self.values().iter().map(|&x| x.maximum(F::ZERO)).collect();
        let a = self.clone();
        let xv = Arc::clone(self.values());
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |dy| {
                let da: Vec<F> = xv
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > F::ZERO { g } else { F::ZERO })
                    .collect();
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Per-group mean over rows: [B·group, C] -> [B, C]. Global average
    /// pooling for a batch of token maps.
    pub fn mean_rows_grouped(&self, group: usize) -> Tensor<F> {
        let c = *self.shape().last().unwrap();
        let rows = self.numel() / c;
        assert_eq!(rows % group, 0, "row count {rows} not divisible by group {group}");
        let b = rows / group;
        let inv = F::from_f64(1.0 / group as f64);
        let v = self.values();
        let mut out = vec![F::ZERO; b * c];
        for r in 0..rows {
            let dst = &mut out[(r / group) * c..(r / group + 1) * c];
            for i in 0..c {
                dst[i] += v[r * c + i];
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let a = self.clone();
        Tensor::from_op(
            out,
            vec![b, c],
            vec![self.clone()],
            Box::new(move |dy| {
                let mut da = vec![F::ZERO; rows * c];
                for r in 0..rows {
                    let src = &dy[(r / group) * c..(r / group + 1) * c];
                    for i in 0..c {
                        da[r * c + i] = src[i] * inv;
                    }
                }
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Mean of per-sample binary cross-entropies over a batch of logits
    /// ([B] or [B,1]) against the given targets.
    pub fn bce_with_logits_mean(&self, targets: &[f64]) -> Tensor<F> {
        let b = self.numel();
        assert_eq!(b, targets.len(), "target count mismatch");
        let z = self.values();
        let inv = F::from_f64(1.0 / b as f64);
        let mut loss = F::ZERO;
        for (zi, &t) in z.iter().zip(targets) {
            let y = F::from_f64(t);
            loss += zi.maximum(F::ZERO) - *zi * y + (F::ONE + (-zi.abs()).exp()).ln();
        }
        let a = self.clone();
        let zv = Arc::clone(self.values());
        let ys: Vec<F> = targets.iter().map(|&t| F::from_f64(t)).collect();
        Tensor::from_op(
            vec![loss * inv],
            vec![1],
            vec![self.clone()],
            Box::new(move |dy| {
                let g = dy[0] * inv;
                let da: Vec<F> = zv
                    .iter()
                    .zip(&ys)
                    .map(|(&zi, &y)| (F::ONE / (F::ONE + (-zi).exp()) - y) * g)
                    .collect();
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Mean over rows (global average pooling): [R, C] -> [1, C].
    pub fn mean_rows(&self) -> Tensor<F> {
        let c = *self.shape().last().unwrap();
        let rows = self.numel() / c;
        let inv = F::from_f64(1.0 / rows as f64);
        let v = self.values();
        let mut out = vec![F::ZERO; c];
        for r in 0..rows {
            for i in 0..c {
                out[i] += v[r * c + i];
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let a = self.clone();
        Tensor::from_op(
            out,
            vec![1, c],
            vec![self.clone()],
            Box::new(move |dy| {
                let mut da = vec![F::ZERO; rows * c];
                for r in 0..rows {
                    for i in 0..c {
                        da[r * c + i] = dy[i] * inv;
                    }
                }
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Zero-copy reshape (buffers are always contiguous).
    pub fn reshape(&self, shape: Vec<usize>) -> Tensor<F> {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape element count mismatch"
        );
        let a = self.clone();
        Tensor::from_view(
            Arc::clone(self.values()),
            shape,
            vec![self.clone()],
            Box::new(move |dy| {
                a.accumulate_grad(dy);
            }),
        )
    }

    /// Materialized 2-D transpose.
    pub fn transpose2(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2);
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let v = self.values();
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let a = self.clone();
        Tensor::from_op(
            out,
            vec![n, m],
            vec![self.clone()],
            Box::new(move |dy| {
                let mut da = vec![F::ZERO; m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = dy[j * m + i];
                    }
                }
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Weighted sum against a constant vector, producing a scalar.
    pub fn dot_const(&self, weights: Arc<Vec<F>>) -> Tensor<F> {
        assert_eq!(self.numel(), weights.len());
        let s: F = self
            .values()
            .iter()
            .zip(weights.iter())
            .map(|(&x, &w)| x * w)
            .sum();
        let a = self.clone();
        let w = Arc::clone(&weights);
        Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |dy| {
                let g = dy[0];
                let da: Vec<F> = w.iter().map(|&wi| wi * g).collect();
                a.accumulate_grad(&da);
            }),
        )
    }

    /// Numerically stable binary cross-entropy on a single logit.
    pub fn bce_with_logits(&self, target: f64) -> Tensor<F> {
        assert_eq!(self.numel(), 1, "bce_with_logits expects a scalar logit");
        let z = self.values()[0];
        let y = F::from_f64(target);
        // max(z,0) − z·y + ln(1 + e^{−|z|})
        let loss = z.maximum(F::ZERO) - z * y + (F::ONE + (-z.abs()).exp()).ln();
        let a = self.clone();
        Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone()],
            Box::new(move |dy| {
                let sigma = F::ONE / (F::ONE + (-z).exp());
                a.accumulate_grad(&[(sigma - y) * dy[0]]);
            }),
        )
    }
}

/// Plain sigmoid on a host value (used to turn logits into probabilities
/// outside the graph).
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
