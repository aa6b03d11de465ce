//! Precomputed index plans for the spatial rearrangements of the encoder.
//!
//! All spatial moves (patch extraction, cyclic shift + window tiling, 2×2
//! merge grouping) are expressed as row-gather index vectors so the autodiff
//! graph only ever sees `gather_rows`.

use std::sync::Arc;

/// Window tiling for one (grid, window, shift) combination.
///
/// `partition[o]` is the source token (row-major over the un-shifted grid)
/// that lands in slot `o`, where slots enumerate windows row-major and, within
/// each window, local positions row-major. The cyclic shift by (−shift,−shift)
/// is folded into the indices. `reverse` is the inverse permutation.
pub struct WindowPlan {
    pub grid: usize,
    pub window: usize,
    pub shift: usize,
    pub num_windows: usize,
    pub partition: Arc<Vec<u32>>,
    pub reverse: Arc<Vec<u32>>,
    /// 0/1 flags [num_windows, w², w²]: may token `a` attend to token `b`
    /// inside this window? All-ones when shift = 0.
    pub allow: Arc<Vec<u8>>,
}

impl WindowPlan {
    pub fn new(grid: usize, window: usize, shift: usize) -> Self {
        assert!(grid % window == 0, "grid {grid} not divisible by window {window}");
        assert!(shift < window, "shift {shift} must be < window {window}");
        let side = grid / window;
        let num_windows = side * side;
        let tokens = grid * grid;
        let ws2 = window * window;

        let mut partition = vec![0u32; tokens];
        let mut reverse = vec![0u32; tokens];
        for wr in 0..side {
            for wc in 0..side {
                for lr in 0..window {
                    for lc in 0..window {
                        let slot = ((wr * side + wc) * ws2) + lr * window + lc;
                        // Position on the shifted canvas, then undo the roll
                        // to find the source token.
                        let sr = (wr * window + lr + shift) % grid;
                        let sc = (wc * window + lc + shift) % grid;
                        let src = sr * grid + sc;
                        partition[slot] = src as u32;
                        reverse[src] = slot as u32;
                    }
                }
            }
        }

        // Region labels on the shifted canvas: three bands per axis
        // ([0,g−w), [g−w,g−s), [g−s,g)); tokens from different bands were not
        // adjacent before the roll and must not attend to each other.
        let band = |i: usize| -> u8 {
            if i < grid - window {
                0
            } else if i < grid - shift {
                1
            } else {
                2
            }
        };
        let allow = if shift == 0 {
            vec![1u8; num_windows * ws2 * ws2]
        } else {
            let mut labels = vec![0u8; tokens]; // indexed by slot
            for wr in 0..side {
                for wc in 0..side {
                    for lr in 0..window {
                        for lc in 0..window {
                            let slot = ((wr * side + wc) * ws2) + lr * window + lc;
                            labels[slot] = 3 * band(wr * window + lr) + band(wc * window + lc);
                        }
                    }
                }
            }
            let mut allow = vec![0u8; num_windows * ws2 * ws2];
            for w in 0..num_windows {
                for a in 0..ws2 {
                    for b in 0..ws2 {
                        let la = labels[w * ws2 + a];
                        let lb = labels[w * ws2 + b];
                        allow[(w * ws2 + a) * ws2 + b] = u8::from(la == lb);
                    }
                }
            }
            allow
        };

        WindowPlan {
            grid,
            window,
            shift,
            num_windows,
            partition: Arc::new(partition),
            reverse: Arc::new(reverse),
            allow: Arc::new(allow),
        }
    }
}

/// Relative-position index: for each (query, key) pair inside a window, the
/// row of the (2w−1)² bias table holding their offset's bias.
pub fn relative_position_index(window: usize) -> Arc<Vec<u32>> {
    let ws2 = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(ws2 * ws2);
    for q in 0..ws2 {
        let (qr, qc) = (q / window, q % window);
        for k in 0..ws2 {
            let (kr, kc) = (k / window, k % window);
            let dr = qr as i64 - kr as i64 + window as i64 - 1;
            let dc = qc as i64 - kc as i64 + window as i64 - 1;
            idx.push((dr * span as i64 + dc) as u32);
        }
    }
    Arc::new(idx)
}

/// Patch extraction order: for each token (row-major over the token grid),
/// the `patch²` pixel rows of that patch, row-major within the patch.
pub fn patch_pixel_index(image_size: usize, patch: usize) -> Arc<Vec<u32>> {
    let grid = image_size / patch;
    let mut idx = Vec::with_capacity(grid * grid * patch * patch);
    for gr in 0..grid {
        for gc in 0..grid {
            for pr in 0..patch {
                for pc in 0..patch {
                    idx.push(((gr * patch + pr) * image_size + (gc * patch + pc)) as u32);
                }
            }
        }
    }
    Arc::new(idx)
}

/// 2×2 merge grouping: index vectors selecting the four quadrant tokens of
/// each 2×2 neighborhood, in the order (even,even), (odd,even), (even,odd),
/// (odd,odd) rows×cols.
pub fn merge_indices(grid: usize) -> [Arc<Vec<u32>>; 4] {
    assert!(grid % 2 == 0);
    let half = grid / 2;
    let mut parts: [Vec<u32>; 4] = Default::default();
    for r in 0..half {
        for c in 0..half {
            parts[0].push(((2 * r) * grid + 2 * c) as u32);
            parts[1].push(((2 * r + 1) * grid + 2 * c) as u32);
            parts[2].push(((2 * r) * grid + 2 * c + 1) as u32);
            parts[3].push(((2 * r + 1) * grid + 2 * c + 1) as u32);
        }
    }
    parts.map(Arc::new)
}

/// Expand a per-image row-index plan to a batch of `batch` images, each
/// occupying `rows_per_image` consecutive source rows.
pub fn batched_indices(per_image: &[u32], rows_per_image: usize, batch: usize) -> Arc<Vec<u32>> {
    let mut out = Vec::with_capacity(per_image.len() * batch);
    for b in 0..batch {
        let off = (b * rows_per_image) as u32;
        out.extend(per_image.iter().map(|&i| i + off));
    }
    Arc::new(out)
}
