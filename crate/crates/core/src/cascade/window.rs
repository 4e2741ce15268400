use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Network;
use crate::tensor::{raw, NdArray};
use crate::volcore::{Dims, LabelMask, Spacing, Volume};

/// Channel-first stack of same-grid volumes, `(c, z, y, x)` with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiVolume {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<f32>,
}

/// Per-class probabilities on a grid.
pub type ProbMap = MultiVolume;

impl MultiVolume {
    pub fn new(channels: usize, dims: Dims, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || data.len() != channels * dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} values for {channels} channels of {dims:?}",
                data.len()
            )));
        }
        Ok(Self { channels, dims, data })
    }

    /// Stacks volumes of identical dims as channels.
    pub fn stack(vols: &[&Volume]) -> Result<Self> {
        let first = vols
            .first()
            .ok_or_else(|| Error::Misuse("stacking zero volumes".into()))?;
        let mut data = Vec::with_capacity(vols.len() * first.len());
        for v in vols {
            if v.dims() != first.dims() {
                return Err(Error::Shape(format!(
                    "channel dims {:?} vs {:?}",
                    v.dims(),
                    first.dims()
                )));
            }
            data.extend(v.to_f32_vec());
        }
        Self::new(vols.len(), first.dims(), data)
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Class index of the largest value per voxel; ties go to the lower class.
    pub fn argmax(&self, spacing: Spacing) -> Result<LabelMask> {
        let n = self.voxels();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.channels {
                    if self.data[c * n + i] > self.data[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask::new(self.dims, spacing, labels)
    }
}

/// Per-tile weighting in the overlap average.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowWeight {
    #[default]
    Uniform,
    /// Separable Gaussian centred on the tile, sigma = patch / 8 per axis.
    Gaussian,
}

fn weight_map(patch: Dims, kind: WindowWeight) -> Vec<f64> {
    let n: usize = patch.iter().product();
    match kind {
        WindowWeight::Uniform => vec![1.0; n],
        WindowWeight::Gaussian => {
            let axis = |len: usize| -> Vec<f64> {
                let c = (len as f64 - 1.0) / 2.0;
                let s = (len as f64 / 8.0).max(1e-3);
                (0..len).map(|i| (-0.5 * ((i as f64 - c) / s).powi(2)).exp()).collect()
            };
            let (wz, wy, wx) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
            let mut w = Vec::with_capacity(n);
            for &a in &wz {
                for &b in &wy {
                    for &c in &wx {
                        w.push((a * b * c).max(1e-6));
                    }
                }
            }
            w
        }
    }
}

/// Tile origins along one axis of length `n` (already padded to at least `patch`).
pub fn tile_starts(n: usize, patch: usize, overlap: f64) -> Vec<usize> {
    let stride = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + patch < n).collect();
    starts.push(n - patch);
    starts.dedup();
    starts
}

/// Softmax probabilities of the finest head, averaged over overlapping tiles.
///
/// The input is zero-padded on the high side up to `patch` where it is smaller;
/// the padding is removed from the result.
pub fn sliding_window_infer(
    net: &Network<f32>,
    input: &MultiVolume,
    overlap_frac: f64,
    weighting: WindowWeight,
) -> Result<ProbMap> {
    if !(0.0..1.0).contains(&overlap_frac) {
        return Err(Error::Misuse(format!("overlap_frac {overlap_frac} outside [0, 1)")));
    }
    let cfg = net.config();
    if input.channels != cfg.in_channels {
        return Err(Error::Shape(format!(
            "{} input channels, network expects {}",
            input.channels, cfg.in_channels
        )));
    }
    let patch = cfg.patch_size;
    let classes = cfg.out_classes;
    let dims = input.dims;
    let padded: Dims = std::array::from_fn(|a| dims[a].max(patch[a]));
    let tile_len: usize = patch.iter().product();
    let weights = weight_map(patch, weighting);
    let n_out: usize = padded.iter().product();
    let mut acc = vec![0.0f64; classes * n_out];
    let mut wsum = vec![0.0f64; n_out];
    let mut tile = vec![0.0f32; input.channels * tile_len];
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| tile_starts(padded[a], patch[a], overlap_frac));
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let origin = [z0, y0, x0];
                gather(input, origin, patch, &mut tile);
                let x = NdArray::from_vec(vec![1, input.channels, patch[0], patch[1], patch[2]], tile.clone())?;
                let logits = net.predict(&x)?.swap_remove(0);
                if !logits.all_finite() {
                    return Err(Error::Numeric(format!("non-finite network output in tile at {origin:?}")));
                }
                let probs = raw::softmax_channels_forward(&logits)?;
                let p = probs.data();
                let mut t = 0;
                for dz in 0..patch[0] {
                    for dy in 0..patch[1] {
                        let row = ((z0 + dz) * padded[1] + y0 + dy) * padded[2] + x0;
                        for dx in 0..patch[2] {
                            let w = weights[t];
                            wsum[row + dx] += w;
                            for c in 0..classes {
                                acc[c * n_out + row + dx] += w * f64::from(p[c * tile_len + t]);
                            }
                            t += 1;
                        }
                    }
                }
            }
        }
    }
    let n = dims.iter().product::<usize>();
    let mut out = vec![0.0f32; classes * n];
    for c in 0..classes {
        let mut i = 0;
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let row = (z * padded[1] + y) * padded[2];
                for x in 0..dims[2] {
                    out[c * n + i] = (acc[c * n_out + row + x] / wsum[row + x]) as f32;
                    i += 1;
                }
            }
        }
    }
    MultiVolume::new(classes, dims, out)
}

/// Copies the `patch` window at `origin` into `tile`, zero outside the input grid.
fn gather(input: &MultiVolume, origin: Dims, patch: Dims, tile: &mut [f32]) {
    let dims = input.dims;
    let n = input.voxels();
    let tile_len: usize = patch.iter().product();
    tile.fill(0.0);
    for c in 0..input.channels {
        let src = &input.data[c * n..(c + 1) * n];
        let dst = &mut tile[c * tile_len..(c + 1) * tile_len];
        for dz in 0..patch[0] {
            let z = origin[0] + dz;
            if z >= dims[0] {
                break;
            }
            for dy in 0..patch[1] {
                let y = origin[1] + dy;
                if y >= dims[1] {
                    break;
                }
                let len = patch[2].min(dims[2].saturating_sub(origin[2]));
                let s = (z * dims[1] + y) * dims[2] + origin[2];
                let d = (dz * patch[1] + dy) * patch[2];
                dst[d..d + len].copy_from_slice(&src[s..s + len]);
            }
        }
    }
}

/// Voxelwise mean of probability maps.
pub fn ensemble(maps: &[ProbMap]) -> Result<ProbMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Misuse("ensemble of zero maps".into()))?;
    let mut acc = vec![0.0f64; first.data.len()];
    for m in maps {
        if m.channels != first.channels || m.dims != first.dims {
            return Err(Error::Shape(format!(
                "ensemble member ({}, {:?}) vs ({}, {:?})",
                m.channels, m.dims, first.channels, first.dims
            )));
        }
        for (a, &v) in acc.iter_mut().zip(&m.data) {
            *a += f64::from(v);
        }
    }
    let k = maps.len() as f64;
    MultiVolume::new(first.channels, first.dims, acc.into_iter().map(|a| (a / k) as f32).collect())
}
