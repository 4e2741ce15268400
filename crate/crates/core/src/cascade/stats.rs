use serde::{Deserialize, Serialize};

use super::components::roi_boxes;
use crate::error::{Error, Result};
use crate::volcore::{resample, Interpolation, LabelMask, Volume, VoxelBox};

pub const DEFAULT_CLIP_LO: f64 = 0.05;
pub const DEFAULT_CLIP_HI: f64 = 99.5;
/// Standard deviations below this are replaced by 1.
pub const MIN_STD: f64 = 1e-8;

/// Intensity statistics used to standardize volumes for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    #[serde(default = "default_lo")]
    pub clip_lo_percentile: f64,
    #[serde(default = "default_hi")]
    pub clip_hi_percentile: f64,
    pub global_mean: f64,
    pub global_std: f64,
    /// Standardize each case with its own clipped mean and std instead of the global pair.
    #[serde(default)]
    pub per_case: bool,
}

fn default_lo() -> f64 {
    DEFAULT_CLIP_LO
}
fn default_hi() -> f64 {
    DEFAULT_CLIP_HI
}

impl DatasetStats {
    pub fn new(mean: f64, std: f64) -> Self {
        Self {
            clip_lo_percentile: DEFAULT_CLIP_LO,
            clip_hi_percentile: DEFAULT_CLIP_HI,
            global_mean: mean,
            global_std: std,
            per_case: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.clip_lo_percentile, self.clip_hi_percentile);
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(Error::Config(format!(
                "clip percentiles must satisfy 0 <= lo < hi <= 100, got ({lo}, {hi})"
            )));
        }
        if !(self.global_std.is_finite() && self.global_std > 0.0) || !self.global_mean.is_finite() {
            return Err(Error::Config(format!(
                "global_std must be positive and finite, got mean {} std {}",
                self.global_mean, self.global_std
            )));
        }
        Ok(())
    }
}

/// Which voxels feed the mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StatsScope {
    /// Every voxel of every case.
    Whole,
    /// Voxels inside the margin-dilated boxes of the two largest foreground components.
    Roi { margin_mm: [f32; 3] },
}

/// Percentile with linear interpolation between order statistics: rank
/// `p / 100 * (n - 1)`.
pub fn percentile(values: &[f32], p: f64) -> Result<f64> {
    Ok(percentiles(values, [p])?[0])
}

fn percentiles<const K: usize>(values: &[f32], ps: [f64; K]) -> Result<[f64; K]> {
    if values.is_empty() {
        return Err(Error::Misuse("percentile of an empty array".into()));
    }
    if let Some(p) = ps.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(Error::Misuse(format!("percentile {p} outside [0, 100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("percentile of an array containing NaN".into()));
    }
    let mut buf = values.to_vec();
    let n = buf.len();
    let mut out = [0.0; K];
    for (o, &p) in out.iter_mut().zip(&ps) {
        let rank = p / 100.0 * (n - 1) as f64;
        let lo = rank.floor() as usize;
        let frac = rank - lo as f64;
        let (_, &mut a, upper) = buf.select_nth_unstable_by(lo, f32::total_cmp);
        let a = f64::from(a);
        *o = if frac == 0.0 || upper.is_empty() {
            a
        } else {
            let b = f64::from(upper.iter().copied().fold(f32::INFINITY, f32::min));
            a + frac * (b - a)
        };
    }
    Ok(out)
}

/// This case's clip bounds `(P_lo, P_hi)`.
pub fn clip_bounds(vol: &Volume, stats: &DatasetStats) -> Result<(f64, f64)> {
    let [lo, hi] = percentiles(&vol.to_f32_vec(), [stats.clip_lo_percentile, stats.clip_hi_percentile])?;
    Ok((lo, hi))
}

fn clipped(vol: &Volume, lo_p: f64, hi_p: f64) -> Result<Vec<f64>> {
    let data = vol.to_f32_vec();
    let [lo, hi] = percentiles(&data, [lo_p, hi_p])?;
    Ok(data.iter().map(|&v| f64::from(v).clamp(lo, hi)).collect())
}

fn guarded(std: f64) -> f64 {
    if std < MIN_STD || !std.is_finite() {
        1.0
    } else {
        std
    }
}

fn mean_std(chunks: &[Vec<f64>]) -> Result<(f64, f64)> {
    let n: usize = chunks.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Misuse("no voxels to collect statistics from".into()));
    }
    let mean = chunks.iter().flatten().sum::<f64>() / n as f64;
    let var = chunks.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok((mean, guarded(var.sqrt())))
}

fn box_values(values: &[f64], mask: &LabelMask, boxes: &[VoxelBox]) -> Vec<f64> {
    let [_, ny, nx] = mask.dims();
    let mut inside = vec![false; values.len()];
    for b in boxes.iter().filter_map(|b| b.clamp_to(mask.dims())) {
        for z in b.lo[0]..=b.hi[0] {
            for y in b.lo[1]..=b.hi[1] {
                let row = (z as usize * ny + y as usize) * nx;
                inside[row + b.lo[2] as usize..=row + b.hi[2] as usize].fill(true);
            }
        }
    }
    values.iter().zip(&inside).filter(|(_, &i)| i).map(|(&v, _)| v).collect()
}

/// Mean and standard deviation of the per-case clipped intensities.
///
/// Percentile fields are echoed from `lo` and `hi`; masks are only read for
/// [`StatsScope::Roi`].
pub fn compute_dataset_stats(
    volumes: &[Volume],
    masks: &[LabelMask],
    scope: StatsScope,
    lo: f64,
    hi: f64,
) -> Result<DatasetStats> {
    if volumes.is_empty() {
        return Err(Error::Misuse("dataset statistics need at least one volume".into()));
    }
    let mut stats = DatasetStats {
        clip_lo_percentile: lo,
        clip_hi_percentile: hi,
        global_mean: 0.0,
        global_std: 1.0,
        per_case: false,
    };
    stats.validate()?;
    let mut chunks = Vec::with_capacity(volumes.len());
    for (i, vol) in volumes.iter().enumerate() {
        let values = clipped(vol, lo, hi)?;
        chunks.push(match scope {
            StatsScope::Whole => values,
            StatsScope::Roi { margin_mm } => {
                let mask = masks
                    .get(i)
                    .ok_or_else(|| Error::Misuse(format!("no mask for volume {i}")))?;
                if mask.dims() != vol.dims() {
                    return Err(Error::Shape(format!(
                        "mask {:?} vs volume {:?} for case {i}",
                        mask.dims(),
                        vol.dims()
                    )));
                }
                box_values(&values, mask, &roi_boxes(mask, 2, margin_mm))
            }
        });
    }
    let (mean, std) = mean_std(&chunks)?;
    stats.global_mean = mean;
    stats.global_std = std;
    Ok(stats)
}

/// Clips to this case's percentile bounds, then standardizes; output is `f32`.
pub fn normalize(vol: &Volume, stats: &DatasetStats) -> Result<Volume> {
    stats.validate()?;
    let values = clipped(vol, stats.clip_lo_percentile, stats.clip_hi_percentile)?;
    let (mean, std) = if stats.per_case {
        mean_std(std::slice::from_ref(&values))?
    } else {
        (stats.global_mean, stats.global_std)
    };
    let out = values.iter().map(|v| ((v - mean) / std) as f32).collect();
    Volume::from_f32(vol.dims(), vol.spacing(), out)
}

/// Spacing of the stage-1 grid: the slice axis doubled.
pub fn stage1_spacing(vol: &Volume) -> [f32; 3] {
    let s = vol.spacing();
    [2.0 * s[0], s[1], s[2]]
}

/// Halves the slice-axis resolution by linear resampling.
pub fn downsample_slices(vol: &Volume) -> Result<Volume> {
    resample(vol, stage1_spacing(vol), Interpolation::Linear)
}

/// Slice-axis downsampling followed by stage-1 normalization.
pub fn prepare_stage1_input(vol: &Volume, stats: &DatasetStats) -> Result<Volume> {
    normalize(&downsample_slices(vol)?, stats)
}
