//! The two-stage pipeline: statistics and normalization, coarse localization,
//! ROI extraction, fine segmentation, postprocessing, ensembling and training.

mod components;
mod roi;
mod stats;
mod train;
mod window;

use serde::{Deserialize, Serialize};

pub use components::{
    connected_components, margin_voxels, mask_components, postprocess_stage, roi_boxes, Component, ComponentMap,
};
pub use roi::{extract_rois, restore_to_original, upsample_mask, RoiCrop, RoiPrediction};
pub use stats::{
    clip_bounds, compute_dataset_stats, downsample_slices, normalize, percentile, prepare_stage1_input,
    stage1_spacing, DatasetStats, StatsScope, DEFAULT_CLIP_HI, DEFAULT_CLIP_LO, MIN_STD,
};
pub use train::{
    coarse_prior, stage1_cases, stage2_cases, train_stage, Adam, TrainCase, TrainConfig, TrainReport, PAPER_LR,
};
pub use window::{ensemble, sliding_window_infer, tile_starts, MultiVolume, ProbMap, WindowWeight};

use crate::error::{Error, Result, ResultExt};
use crate::nets::Network;
use crate::volcore::{LabelMask, Volume};

pub const DEFAULT_MARGIN_MM: [f32; 3] = [16.0; 3];
pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Inference settings shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub stage1_stats: DatasetStats,
    pub stage2_stats: DatasetStats,
    #[serde(default = "default_overlap")]
    pub overlap_frac: f64,
    #[serde(default)]
    pub weighting: WindowWeight,
    #[serde(default = "default_margin")]
    pub margin_mm: [f32; 3],
    #[serde(default = "default_keep1")]
    pub keep_k_stage1: usize,
    #[serde(default = "default_keep2")]
    pub keep_k_stage2: usize,
}

fn default_overlap() -> f64 {
    DEFAULT_OVERLAP
}
fn default_margin() -> [f32; 3] {
    DEFAULT_MARGIN_MM
}
fn default_keep1() -> usize {
    2
}
fn default_keep2() -> usize {
    1
}

impl CascadeConfig {
    pub fn new(stage1_stats: DatasetStats, stage2_stats: DatasetStats) -> Self {
        Self {
            stage1_stats,
            stage2_stats,
            overlap_frac: DEFAULT_OVERLAP,
            weighting: WindowWeight::Uniform,
            margin_mm: DEFAULT_MARGIN_MM,
            keep_k_stage1: default_keep1(),
            keep_k_stage2: default_keep2(),
        }
    }
}

/// Final prediction plus every intermediate of one cascade run.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    /// Postprocessed coarse mask on the slice-downsampled grid.
    pub stage1_mask_lowres: LabelMask,
    pub roi_list: Vec<RoiCrop>,
    /// Ensembled fine-stage probabilities and postprocessed labels per ROI.
    pub stage2: Vec<RoiPrediction>,
    pub final_mask: LabelMask,
}

fn infer_ensemble(nets: &[Network<f32>], input: &MultiVolume, cfg: &CascadeConfig) -> Result<ProbMap> {
    let maps = nets
        .iter()
        .map(|n| sliding_window_infer(n, input, cfg.overlap_frac, cfg.weighting))
        .collect::<Result<Vec<_>>>()?;
    ensemble(&maps)
}

/// Coarse stage on its own: downsample, normalize, infer, ensemble, argmax, keep the
/// largest components.
pub fn run_stage1(nets: &[Network<f32>], vol: &Volume, cfg: &CascadeConfig) -> Result<LabelMask> {
    if nets.is_empty() {
        return Err(Error::Misuse("stage 1 needs at least one model".into()));
    }
    let input = prepare_stage1_input(vol, &cfg.stage1_stats)?;
    let probs = infer_ensemble(nets, &MultiVolume::stack(&[&input])?, cfg)?;
    postprocess_stage(&probs.argmax(input.spacing())?, cfg.keep_k_stage1)
}

/// Fine stage on ROIs already extracted.
pub fn run_stage2(nets: &[Network<f32>], rois: &[RoiCrop], cfg: &CascadeConfig) -> Result<Vec<RoiPrediction>> {
    if nets.is_empty() {
        return Err(Error::Misuse("stage 2 needs at least one model".into()));
    }
    rois.iter()
        .enumerate()
        .map(|(i, roi)| {
            let prior = roi.prior_crop.to_volume();
            let input = MultiVolume::stack(&[&roi.image_crop, &prior])?;
            let probs = infer_ensemble(nets, &input, cfg).context(|| format!("ROI {i}"))?;
            let labels = postprocess_stage(&probs.argmax(roi.image_crop.spacing())?, cfg.keep_k_stage2)?;
            RoiPrediction::new(roi.bbox, probs, labels)
        })
        .collect()
}

/// Full coarse-to-fine prediction for one raw volume.
pub fn run_cascade(
    stage1: &[Network<f32>],
    stage2: &[Network<f32>],
    vol: &Volume,
    cfg: &CascadeConfig,
) -> Result<CascadeOutput> {
    if stage2.is_empty() {
        return Err(Error::Misuse("stage 2 needs at least one model".into()));
    }
    let stage1_mask_lowres = run_stage1(stage1, vol, cfg).context(|| "stage 1".into())?;
    let image = normalize(vol, &cfg.stage2_stats).context(|| "stage 2 normalization".into())?;
    let roi_list = extract_rois(&stage1_mask_lowres, &image, cfg.margin_mm).context(|| "ROI extraction".into())?;
    let stage2_out = run_stage2(stage2, &roi_list, cfg).context(|| "stage 2".into())?;
    let final_mask = restore_to_original(&stage2_out, vol.dims(), vol.spacing())?;
    Ok(CascadeOutput {
        stage1_mask_lowres,
        roi_list,
        stage2: stage2_out,
        final_mask,
    })
}
