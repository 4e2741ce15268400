use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Triple;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Localization U-Net: conv/norm/leaky-ReLU pairs, max pooling, concatenated skips.
    PlainUnet,
    /// Pre-activation residual U-Net with strided-conv downsampling, additive skips and
    /// deep-supervision heads.
    ResDsUnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadUpsample {
    Nearest,
    Transposed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub arch: Arch,
    pub in_channels: usize,
    pub out_classes: usize,
    #[serde(default = "default_base")]
    pub base_filters: usize,
    #[serde(default = "default_cap")]
    pub filter_cap: usize,
    pub poolings_per_axis: Triple,
    pub patch_size: Triple,
    #[serde(default = "default_ds_levels")]
    pub ds_levels: usize,
    #[serde(default = "default_slope")]
    pub negative_slope: f64,
    /// When set, the second input channel is the stage-1 mask and `in_channels` must be 2.
    #[serde(default)]
    pub spatial_prior: bool,
    #[serde(default = "default_head_upsample")]
    pub head_upsample: HeadUpsample,
}

fn default_base() -> usize {
    30
}
fn default_cap() -> usize {
    320
}
fn default_ds_levels() -> usize {
    1
}
fn default_slope() -> f64 {
    0.01
}
fn default_head_upsample() -> HeadUpsample {
    HeadUpsample::Nearest
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl NetworkConfig {
    /// Paper localization network: patch 80x160x160, poolings (4,5,5), base 30.
    pub fn localization() -> Self {
        Self {
            arch: Arch::PlainUnet,
            in_channels: 1,
            out_classes: 2,
            base_filters: 30,
            filter_cap: 320,
            poolings_per_axis: [4, 5, 5],
            patch_size: [80, 160, 160],
            ds_levels: 1,
            negative_slope: 0.01,
            spatial_prior: false,
            head_upsample: HeadUpsample::Nearest,
        }
    }

    /// Paper segmentation network: patch 40x128x128, poolings (3,5,5), base 30,
    /// image + prior input, three classes.
    pub fn segmentation() -> Self {
        Self {
            arch: Arch::ResDsUnet,
            in_channels: 2,
            out_classes: 3,
            base_filters: 30,
            filter_cap: 320,
            poolings_per_axis: [3, 5, 5],
            patch_size: [40, 128, 128],
            ds_levels: 3,
            negative_slope: 0.0,
            spatial_prior: true,
            head_upsample: HeadUpsample::Nearest,
        }
    }

    /// Resolution levels: one more than the largest per-axis pooling count.
    pub fn levels(&self) -> usize {
        self.poolings_per_axis.iter().copied().max().unwrap_or(0) + 1
    }

    pub fn decoder_levels(&self) -> usize {
        self.levels() - 1
    }

    pub fn filters(&self, level: usize) -> usize {
        let doubled = self.base_filters.saturating_mul(1usize.checked_shl(level as u32).unwrap_or(usize::MAX));
        doubled.min(self.filter_cap)
    }

    /// Downsampling factor between `level` and `level + 1`.
    pub fn pool_kernel(&self, level: usize) -> Triple {
        self.poolings_per_axis.map(|p| if level < p { 2 } else { 1 })
    }

    /// Accumulated downsampling from full resolution to `level`.
    pub fn scale_at(&self, level: usize) -> Triple {
        self.poolings_per_axis.map(|p| 1 << level.min(p))
    }

    pub fn bottleneck_dims(&self) -> Triple {
        std::array::from_fn(|a| self.patch_size[a] >> self.poolings_per_axis[a])
    }

    pub fn num_heads(&self) -> usize {
        match self.arch {
            Arch::PlainUnet => 1,
            Arch::ResDsUnet => self.ds_levels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_classes < 2 {
            return err(format!(
                "in_channels must be >= 1 and out_classes >= 2 (got {}, {})",
                self.in_channels, self.out_classes
            ));
        }
        if self.base_filters == 0 || self.filter_cap < self.base_filters {
            return err(format!(
                "base_filters must be >= 1 and <= filter_cap (got {}, cap {})",
                self.base_filters, self.filter_cap
            ));
        }
        for a in 0..3 {
            let step = 1usize << self.poolings_per_axis[a];
            if self.patch_size[a] == 0 || !self.patch_size[a].is_multiple_of(step) {
                return err(format!(
                    "patch_size[{a}] = {} is not divisible by 2^{}",
                    self.patch_size[a], self.poolings_per_axis[a]
                ));
            }
        }
        if !(self.negative_slope >= 0.0 && self.negative_slope.is_finite()) {
            return err(format!("negative_slope must be >= 0, got {}", self.negative_slope));
        }
        if self.arch == Arch::ResDsUnet {
            if self.ds_levels == 0 || self.ds_levels > self.decoder_levels() {
                return err(format!(
                    "ds_levels must lie in 1..={} for this pooling schedule, got {}",
                    self.decoder_levels(),
                    self.ds_levels
                ));
            }
            if self.decoder_levels() == 0 {
                return err("res_ds_unet needs at least one pooling".into());
            }
        }
        if self.spatial_prior && self.in_channels != 2 {
            return err(format!(
                "spatial prior needs in_channels = 2 (image + prior), got {}",
                self.in_channels
            ));
        }
        Ok(())
    }
}
