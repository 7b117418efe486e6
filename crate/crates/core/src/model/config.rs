use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters for one PainViT instance.
///
/// [`PainViTConfig::default`] is the published configuration: three stages
/// with depths 1/3/4, widths 192/288/500 and 3/3/4 heads on 224×224 input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PainViTConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub dims: [usize; 3],
    pub depths: [usize; 3],
    pub heads: [usize; 3],
    /// Hidden width of the token-mixer FFN, as a multiple of the stage width.
    pub ffn_ratio: usize,
    /// Hidden width of the subsample block, as a multiple of its input width.
    pub subsample_ratio: usize,
    pub num_classes: usize,
    /// Batch norm on each attention head's input before the Q/K/V projections.
    pub qkv_norm: bool,
    /// Residual connections around token-mixer sub-steps and attention.
    pub residual: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for PainViTConfig {
    fn default() -> Self {
        PainViTConfig {
            in_channels: 3,
            image_size: 224,
            dims: [192, 288, 500],
            depths: [1, 3, 4],
            heads: [3, 3, 4],
            ffn_ratio: 2,
            subsample_ratio: 4,
            num_classes: 3,
            qkv_norm: false,
            residual: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// Resolved per-stage geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub grid: (usize, usize),
}

impl StageConfig {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Spatial extent after a 3×3, stride-2, padding-1 convolution.
pub(crate) fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

impl PainViTConfig {
    /// A scaled-down configuration with the same topology, for tests and
    /// desk-scale experiments.
    pub fn tiny() -> Self {
        PainViTConfig {
            dims: [16, 24, 32],
            heads: [2, 2, 4],
            ..PainViTConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.num_classes == 0 {
            return cfg("in_channels and num_classes must be positive".into());
        }
        if self.image_size < 16 {
            return cfg(format!("image_size {} is below the 16x patch size", self.image_size));
        }
        if self.dims[0] % 8 != 0 {
            return cfg(format!(
                "first stage width {} must be divisible by 8 for the patch-embed stem",
                self.dims[0]
            ));
        }
        for s in 0..3 {
            if self.depths[s] == 0 || self.heads[s] == 0 {
                return cfg(format!("stage {s}: depth and heads must be positive"));
            }
            if self.dims[s] % self.heads[s] != 0 {
                return cfg(format!(
                    "stage {s}: width {} not divisible by {} heads",
                    self.dims[s], self.heads[s]
                ));
            }
        }
        if self.ffn_ratio == 0 || self.subsample_ratio == 0 {
            return cfg("ffn_ratio and subsample_ratio must be positive".into());
        }
        if self.bn_eps <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return cfg(format!(
                "batch norm eps {} / momentum {} out of range",
                self.bn_eps, self.bn_momentum
            ));
        }
        Ok(())
    }

    /// Channel widths of the four stride-2 stem convolutions.
    pub fn stem_widths(&self) -> [usize; 4] {
        let d = self.dims[0];
        [d / 8, d / 4, d / 2, d]
    }

    /// Token grid after the stem (16× downsampling).
    pub fn stem_grid(&self) -> usize {
        (0..4).fold(self.image_size, |n, _| halve(n))
    }

    pub fn stages(&self) -> [StageConfig; 3] {
        let mut g = self.stem_grid();
        std::array::from_fn(|s| {
            if s > 0 {
                g = halve(g);
            }
            StageConfig {
                depth: self.depths[s],
                dim: self.dims[s],
                heads: self.heads[s],
                grid: (g, g),
            }
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.dims[2]
    }
}
