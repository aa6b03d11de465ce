//! Encoder hyperparameters and their consistency rules.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hierarchical shifted-window encoder configuration.
///
/// Defaults are the Swin-Small geometry: 224×224 input, 4×4 patches, 7×7
/// windows, four stages of depths [2,2,18,2] at 96 base channels.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SwinConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub num_heads: [usize; 4],
    pub mlp_ratio: f64,
    pub dropout_rate: f64,
    pub drop_path_rate: f64,
}

impl Default for SwinConfig {
    fn default() -> Self {
        SwinConfig {
            image_size: 224,
            patch_size: 4,
            window_size: 7,
            embed_dim: 96,
            depths: [2, 2, 18, 2],
            num_heads: [3, 6, 12, 24],
            mlp_ratio: 4.0,
            dropout_rate: 0.0,
            drop_path_rate: 0.0,
        }
    }
}

impl SwinConfig {
    /// Small geometry for fast runs: 64×64 input, 2×2 windows, 24 base
    /// channels, one block per stage.
    pub fn toy() -> Self {
        SwinConfig {
            image_size: 64,
            patch_size: 4,
            window_size: 2,
            embed_dim: 24,
            depths: [1, 1, 1, 1],
            num_heads: [1, 2, 4, 8],
            mlp_ratio: 4.0,
            dropout_rate: 0.0,
            drop_path_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.window_size == 0 {
            return Err(Error::config("image_size, patch_size, window_size must be nonzero"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be nonzero"));
        }
        for s in 0..4 {
            let grid = self.stage_grid(s);
            if grid == 0 || self.base_grid() % (1 << s) != 0 {
                return Err(Error::config(format!(
                    "stage {} grid degenerates (base grid {} not divisible by {})",
                    s + 1,
                    self.base_grid(),
                    1 << s
                )));
            }
            if grid % self.window_size != 0 {
                return Err(Error::config(format!(
                    "stage {} grid {} not divisible by window_size {}",
                    s + 1,
                    grid,
                    self.window_size
                )));
            }
            if self.num_heads[s] == 0 || self.stage_channels(s) % self.num_heads[s] != 0 {
                return Err(Error::config(format!(
                    "stage {} channels {} not divisible by num_heads {}",
                    s + 1,
                    self.stage_channels(s),
                    self.num_heads[s]
                )));
            }
            if self.depths[s] == 0 {
                return Err(Error::config(format!("stage {} has zero blocks", s + 1)));
            }
        }
        for s in 0..3 {
            if self.stage_grid(s) % 2 != 0 {
                return Err(Error::config(format!(
                    "stage {} grid {} must be even for patch merging",
                    s + 1,
                    self.stage_grid(s)
                )));
            }
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config("dropout rates must lie in [0,1)"));
        }
        Ok(())
    }

    /// Token grid side length after patch embedding.
    pub fn base_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token grid side length at stage `s` (0-based).
    pub fn stage_grid(&self, s: usize) -> usize {
        self.base_grid() >> s
    }

    /// Channel count at stage `s` (0-based): embed_dim · 2^s.
    pub fn stage_channels(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn stage_tokens(&self, s: usize) -> usize {
        let g = self.stage_grid(s);
        g * g
    }

    /// Hidden width of the block MLP at stage `s`.
    pub fn mlp_hidden(&self, s: usize) -> usize {
        (self.stage_channels(s) as f64 * self.mlp_ratio).round() as usize
    }

    /// Shift used by odd-indexed blocks.
    pub fn shift(&self) -> usize {
        self.window_size / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_with_expected_geometry() {
        let cfg = SwinConfig::default();
        cfg.validate().unwrap();
        assert_eq!(
            (0..4).map(|s| cfg.stage_grid(s)).collect::<Vec<_>>(),
            vec![56, 28, 14, 7]
        );
        assert_eq!(
            (0..4).map(|s| cfg.stage_channels(s)).collect::<Vec<_>>(),
            vec![96, 192, 384, 768]
        );
        assert_eq!(
            (0..4).map(|s| cfg.stage_tokens(s)).collect::<Vec<_>>(),
            vec![3136, 784, 196, 49]
        );
    }

    #[test]
    fn toy_config_validates() {
        SwinConfig::toy().validate().unwrap();
    }

    #[test]
    fn indivisible_window_rejected() {
        let cfg = SwinConfig { window_size: 5, ..SwinConfig::default() };
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("window_size"));
    }

    #[test]
    fn head_divisibility_enforced() {
        let cfg = SwinConfig { num_heads: [5, 6, 12, 24], ..SwinConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
