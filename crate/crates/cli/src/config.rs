use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use voxcascade::cascade::{
    DatasetStats, TrainConfig, WindowWeight, DEFAULT_CLIP_HI, DEFAULT_CLIP_LO, DEFAULT_MARGIN_MM, DEFAULT_OVERLAP,
    PAPER_LR,
};
use voxcascade::nets::{Arch, NetworkConfig};

/// Everything a run needs, read from one strict JSON document. See `docs/config.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lo")]
    pub clip_lo_percentile: f64,
    #[serde(default = "default_hi")]
    pub clip_hi_percentile: f64,
    #[serde(default)]
    pub per_case: bool,
    #[serde(default = "default_overlap")]
    pub overlap_frac: f64,
    #[serde(default)]
    pub weighting: WindowWeight,
    #[serde(default = "default_margin")]
    pub margin_mm: [f32; 3],
    /// Case ids used by `stats` and `train`; all cases when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_cases: Option<Vec<String>>,
    /// Case ids used by `infer` and `cascade`; all cases when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infer_cases: Option<Vec<String>>,
    #[serde(default)]
    pub stage1: StageConfig,
    #[serde(default)]
    pub stage2: StageConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Defaults to the paper network of the stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub train: TrainSettings,
    /// Components kept after argmax: 2 for stage 1, 1 per ROI for stage 2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_k: Option<usize>,
    /// Fixed statistics; otherwise read from `<out_dir>/stats_stage<k>.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<DatasetStats>,
    /// Models used when `--ckpt` flags are absent.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    #[serde(default = "default_fg_prob")]
    pub fg_oversample_prob: f64,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_jitter")]
    pub roi_jitter_vox: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            lr: default_lr(),
            max_steps: default_steps(),
            fg_oversample_prob: default_fg_prob(),
            checkpoint_every: 0,
            roi_jitter_vox: default_jitter(),
        }
    }
}

fn default_lo() -> f64 {
    DEFAULT_CLIP_LO
}
fn default_hi() -> f64 {
    DEFAULT_CLIP_HI
}
fn default_overlap() -> f64 {
    DEFAULT_OVERLAP
}
fn default_margin() -> [f32; 3] {
    DEFAULT_MARGIN_MM
}
fn default_batch() -> usize {
    2
}
fn default_lr() -> f64 {
    PAPER_LR
}
fn default_steps() -> usize {
    1000
}
fn default_fg_prob() -> f64 {
    0.33
}
fn default_jitter() -> usize {
    4
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).context("invalid config")?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, fills defaults and validates. Path existence is checked separately by
/// [`RunConfig::check_paths`].
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("config {}", path.display()))
}

impl RunConfig {
    pub fn network(&self, stage: u8) -> NetworkConfig {
        match stage {
            1 => self.stage1.network.clone().unwrap_or_else(NetworkConfig::localization),
            _ => self.stage2.network.clone().unwrap_or_else(NetworkConfig::segmentation),
        }
    }

    pub fn stage(&self, stage: u8) -> &StageConfig {
        if stage == 1 {
            &self.stage1
        } else {
            &self.stage2
        }
    }

    pub fn keep_k(&self, stage: u8) -> usize {
        self.stage(stage).keep_k.unwrap_or(if stage == 1 { 2 } else { 1 })
    }

    pub fn train_config(&self, stage: u8) -> TrainConfig {
        let t = &self.stage(stage).train;
        TrainConfig {
            stage,
            patch_size: self.network(stage).patch_size,
            batch_size: t.batch_size,
            lr: t.lr,
            max_steps: t.max_steps,
            fg_oversample_prob: t.fg_oversample_prob,
            seed: self.seed.wrapping_add(u64::from(stage)),
            checkpoint_every: t.checkpoint_every,
            roi_jitter_vox: t.roi_jitter_vox,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.clip_lo_percentile, self.clip_hi_percentile);
        ensure!(
            (0.0..=100.0).contains(&lo) && (0.0..=100.0).contains(&hi) && lo < hi,
            "clip_lo_percentile/clip_hi_percentile must satisfy 0 <= lo < hi <= 100, got ({lo}, {hi})"
        );
        ensure!(
            (0.0..1.0).contains(&self.overlap_frac),
            "overlap_frac must lie in [0, 1), got {}",
            self.overlap_frac
        );
        ensure!(
            self.margin_mm.iter().all(|m| m.is_finite() && *m >= 0.0),
            "margin_mm must be finite and >= 0, got {:?}",
            self.margin_mm
        );
        for stage in [1u8, 2] {
            let s = self.stage(stage);
            let name = format!("stage{stage}");
            let net = self.network(stage);
            net.validate().with_context(|| format!("{name}.network"))?;
            let (arch, inputs, classes) = if stage == 1 { (Arch::PlainUnet, 1, 2) } else { (Arch::ResDsUnet, 2, 3) };
            ensure!(net.arch == arch, "{name}.network.arch must be {arch:?}");
            ensure!(net.in_channels == inputs, "{name}.network.in_channels must be {inputs}");
            ensure!(net.out_classes == classes, "{name}.network.out_classes must be {classes}");
            let t = &s.train;
            ensure!(t.lr.is_finite() && t.lr > 0.0, "{name}.train.lr must be positive and finite, got {}", t.lr);
            ensure!(t.batch_size >= 1, "{name}.train.batch_size must be >= 1");
            ensure!(t.max_steps >= 1, "{name}.train.max_steps must be >= 1");
            ensure!(
                (0.0..=1.0).contains(&t.fg_oversample_prob),
                "{name}.train.fg_oversample_prob must lie in [0, 1], got {}",
                t.fg_oversample_prob
            );
            ensure!(s.keep_k != Some(0), "{name}.keep_k must be >= 1");
            if let Some(st) = &s.stats {
                st.validate().with_context(|| format!("{name}.stats"))?;
            }
        }
        Ok(())
    }

    /// Every referenced path must exist, except `out_dir`, which is created. `synth`
    /// creates `data_dir` as well.
    pub fn check_paths(&self, create_data_dir: bool) -> Result<()> {
        if create_data_dir {
            std::fs::create_dir_all(&self.data_dir)
                .with_context(|| format!("creating data_dir {}", self.data_dir.display()))?;
        } else if !self.data_dir.is_dir() {
            bail!("data_dir {} does not exist", self.data_dir.display());
        }
        for stage in [1u8, 2] {
            for p in &self.stage(stage).checkpoints {
                ensure!(p.is_file(), "stage{stage}.checkpoints: {} does not exist", p.display());
            }
        }
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating out_dir {}", self.out_dir.display()))
    }
}
