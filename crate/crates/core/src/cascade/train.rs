use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::components::roi_boxes;
use super::roi::upsample_mask;
use super::stats::{normalize, prepare_stage1_input, stage1_spacing, DatasetStats};
use super::window::MultiVolume;
use crate::error::{Error, Result};
use crate::lossmetrics::{combined_loss, deep_supervision_loss, LossConfig, Target};
use crate::nets::Network;
use crate::tensor::{Graph, NdArray};
use crate::volcore::{resample, Dims, Interpolation, LabelMask, Volume, VoxelBox};

pub const PAPER_LR: f64 = 3e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub patch_size: Dims,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub max_steps: usize,
    #[serde(default = "default_fg_prob")]
    pub fg_oversample_prob: f64,
    #[serde(default)]
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Per-side random shift of stage-2 training boxes, in voxels.
    #[serde(default = "default_jitter")]
    pub roi_jitter_vox: usize,
}

fn default_batch() -> usize {
    2
}
fn default_lr() -> f64 {
    PAPER_LR
}
fn default_fg_prob() -> f64 {
    0.33
}
fn default_jitter() -> usize {
    4
}

impl TrainConfig {
    pub fn new(stage: u8, patch_size: Dims, max_steps: usize, seed: u64) -> Self {
        Self {
            stage,
            patch_size,
            batch_size: default_batch(),
            lr: default_lr(),
            max_steps,
            fg_oversample_prob: default_fg_prob(),
            seed,
            checkpoint_every: 0,
            roi_jitter_vox: default_jitter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_oversample_prob) {
            return Err(Error::Config(format!(
                "fg_oversample_prob must lie in [0, 1], got {}",
                self.fg_oversample_prob
            )));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with constant step size.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [NdArray<f32>], grads: &[NdArray<f32>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Misuse(format!("{} grads for {} params", grads.len(), params.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = (self.lr / c1) as f32;
        let (c2, eps) = (c2 as f32, self.eps as f32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("grad {:?} for param {:?}", g.shape(), p.shape())));
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr * *mi / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One training volume with its labels and the boxes patches are drawn from.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub input: MultiVolume,
    pub labels: Vec<u8>,
    /// Sampling regions; empty means the whole grid.
    pub regions: Vec<VoxelBox>,
    foreground: Vec<u32>,
}

impl TrainCase {
    pub fn new(input: MultiVolume, labels: Vec<u8>, regions: Vec<VoxelBox>) -> Result<Self> {
        if labels.len() != input.voxels() {
            return Err(Error::Shape(format!(
                "{} labels for grid {:?}",
                labels.len(),
                input.dims
            )));
        }
        let foreground = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(i, _)| i as u32)
            .collect();
        Ok(Self {
            input,
            labels,
            regions,
            foreground,
        })
    }
}

/// Coarse-stage cases: slice-downsampled normalized image, binary organ labels.
pub fn stage1_cases(cases: &[(Volume, LabelMask)], stats: &DatasetStats) -> Result<Vec<TrainCase>> {
    cases
        .iter()
        .map(|(vol, mask)| {
            let input = prepare_stage1_input(vol, stats)?;
            let labels = resample(&mask.binarized().to_volume(), stage1_spacing(vol), Interpolation::Nearest)?;
            TrainCase::new(
                MultiVolume::stack(&[&input])?,
                labels.as_u8().expect("u8 stays u8").to_vec(),
                Vec::new(),
            )
        })
        .collect()
}

/// Ground-truth organ mask degraded to the coarse grid and back.
pub fn coarse_prior(mask: &LabelMask) -> Result<LabelMask> {
    let coarse = resample(&mask.binarized().to_volume(), stage1_spacing(&mask.to_volume()), Interpolation::Nearest)?;
    upsample_mask(&LabelMask::try_from(coarse)?, mask.dims(), mask.spacing())
}

/// Fine-stage cases: normalized image plus coarse prior channel, sampled inside
/// margin-dilated ground-truth organ boxes.
pub fn stage2_cases(cases: &[(Volume, LabelMask)], stats: &DatasetStats, margin_mm: [f32; 3]) -> Result<Vec<TrainCase>> {
    cases
        .iter()
        .map(|(vol, mask)| {
            let image = normalize(vol, stats)?;
            let prior = coarse_prior(mask)?.to_volume();
            TrainCase::new(
                MultiVolume::stack(&[&image, &prior])?,
                mask.labels().to_vec(),
                roi_boxes(mask, 2, margin_mm),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
}

fn unflatten(i: usize, dims: Dims) -> [i64; 3] {
    let x = i % dims[2];
    let y = (i / dims[2]) % dims[1];
    let z = i / (dims[1] * dims[2]);
    [z as i64, y as i64, x as i64]
}

struct Sampler<'a> {
    cfg: &'a TrainConfig,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn region(&mut self, case: &TrainCase) -> VoxelBox {
        if case.regions.is_empty() {
            return VoxelBox::full(case.input.dims);
        }
        let mut b = case.regions[self.rng.gen_range(0..case.regions.len())];
        let j = self.cfg.roi_jitter_vox as i64;
        if j > 0 {
            for a in 0..3 {
                b.lo[a] += self.rng.gen_range(-j..=j);
                b.hi[a] += self.rng.gen_range(-j..=j);
                if b.hi[a] < b.lo[a] {
                    b.hi[a] = b.lo[a];
                }
            }
        }
        b
    }

    /// Fills one batch slot; voxels outside the region or the grid read as zero.
    fn patch(&mut self, case: &TrainCase, x: &mut [f32], y: &mut [u8]) {
        let patch = self.cfg.patch_size;
        let dims = case.input.dims;
        let region = self.region(case);
        let max_start: [i64; 3] =
            std::array::from_fn(|a| region.lo[a] + (region.extent()[a] as i64 - patch[a] as i64).max(0));
        let mut center = None;
        if !case.foreground.is_empty() && self.rng.gen_bool(self.cfg.fg_oversample_prob) {
            for _ in 0..32 {
                let v = unflatten(case.foreground[self.rng.gen_range(0..case.foreground.len())] as usize, dims);
                if region.contains(v) {
                    center = Some(v);
                    break;
                }
            }
        }
        let start: [i64; 3] = match center {
            Some(c) => std::array::from_fn(|a| (c[a] - patch[a] as i64 / 2).clamp(region.lo[a], max_start[a])),
            None => std::array::from_fn(|a| self.rng.gen_range(region.lo[a]..=max_start[a])),
        };
        let valid: [(i64, i64); 3] = std::array::from_fn(|a| (region.lo[a].max(0), region.hi[a].min(dims[a] as i64 - 1)));
        let tile: usize = patch.iter().product();
        let n = case.input.voxels();
        x.fill(0.0);
        y.fill(0);
        for dz in 0..patch[0] {
            let z = start[0] + dz as i64;
            if z < valid[0].0 || z > valid[0].1 {
                continue;
            }
            for dy in 0..patch[1] {
                let yy = start[1] + dy as i64;
                if yy < valid[1].0 || yy > valid[1].1 {
                    continue;
                }
                let x_lo = valid[2].0.max(start[2]);
                let x_hi = valid[2].1.min(start[2] + patch[2] as i64 - 1);
                if x_hi < x_lo {
                    continue;
                }
                let len = (x_hi - x_lo + 1) as usize;
                let s = (z as usize * dims[1] + yy as usize) * dims[2] + x_lo as usize;
                let d = (dz * patch[1] + dy) * patch[2] + (x_lo - start[2]) as usize;
                for c in 0..case.input.channels {
                    x[c * tile + d..c * tile + d + len].copy_from_slice(&case.input.data[c * n + s..c * n + s + len]);
                }
                y[d..d + len].copy_from_slice(&case.labels[s..s + len]);
            }
        }
    }
}

fn abort(net: &Network<f32>, ckpt_dir: Option<&Path>, msg: String) -> Error {
    if let Some(dir) = ckpt_dir {
        if let Err(e) = net.save_checkpoint(dir.join("last_good.ckpt")) {
            return e.context(msg);
        }
    }
    Error::Numeric(msg)
}

/// Trains `net` in place with Adam on randomly sampled patches.
///
/// Stage 1 uses the combined loss on its single head, stage 2 the deep-supervision
/// loss over all heads. A non-finite loss aborts with a numeric error; when
/// `ckpt_dir` is set the parameters from before that step are saved as
/// `last_good.ckpt`.
pub fn train_stage(
    cfg: &TrainConfig,
    net: &mut Network<f32>,
    data: &[TrainCase],
    ckpt_dir: Option<&Path>,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    let ncfg = net.config().clone();
    if cfg.patch_size != ncfg.patch_size {
        return Err(Error::Config(format!(
            "train patch {:?} differs from network patch {:?}",
            cfg.patch_size, ncfg.patch_size
        )));
    }
    if data.is_empty() {
        return Err(Error::Misuse("training needs at least one case".into()));
    }
    if let Some(c) = data.iter().find(|c| c.input.channels != ncfg.in_channels) {
        return Err(Error::Shape(format!(
            "training case has {} channels, network expects {}",
            c.input.channels, ncfg.in_channels
        )));
    }
    let loss_cfg = LossConfig::default();
    let mut sampler = Sampler {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut adam = Adam::new(cfg.lr);
    let tile: usize = cfg.patch_size.iter().product();
    let b = cfg.batch_size;
    let mut xs = vec![0.0f32; b * ncfg.in_channels * tile];
    let mut ys = vec![0u8; b * tile];
    let mut trace = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        for s in 0..b {
            let case = &data[sampler.rng.gen_range(0..data.len())];
            let xslot = &mut xs[s * ncfg.in_channels * tile..(s + 1) * ncfg.in_channels * tile];
            sampler.patch(case, xslot, &mut ys[s * tile..(s + 1) * tile]);
        }
        let p = cfg.patch_size;
        let x = NdArray::from_vec(vec![b, ncfg.in_channels, p[0], p[1], p[2]], xs.clone())?;
        let target = Target::new(b, p, ys.clone())?;
        let mut g = Graph::new();
        let params = net.bind(&mut g, true);
        let xi = g.constant(x);
        let outs = net.forward_bound(&mut g, &params, xi)?;
        if outs.iter().any(|&o| !g.value(o).all_finite()) {
            return Err(abort(net, ckpt_dir, format!("non-finite logits at step {step}")));
        }
        let loss = if cfg.stage == 1 {
            combined_loss(&mut g, outs[0], &target, &loss_cfg)?
        } else {
            deep_supervision_loss(&mut g, &outs, &target, &loss_cfg)?
        };
        let value = f64::from(g.value(loss).item()?);
        if !value.is_finite() {
            return Err(abort(net, ckpt_dir, format!("non-finite loss {value} at step {step}")));
        }
        g.backward(loss)?;
        let grads: Vec<NdArray<f32>> = params
            .iter()
            .zip(net.params().values())
            .map(|(&t, v)| g.grad(t).cloned().unwrap_or_else(|| NdArray::zeros(v.shape().to_vec())))
            .collect();
        adam.step(net.params_mut().values_mut(), &grads)?;
        trace.push(value);
        progress(step, value);
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                net.save_checkpoint(dir.join(format!("step_{:06}.ckpt", step + 1)))?;
            }
        }
    }
    Ok(TrainReport { loss_trace: trace })
}
