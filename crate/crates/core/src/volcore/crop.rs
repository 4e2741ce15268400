use serde::{Deserialize, Serialize};

use super::volume::{flat_index, Dims, LabelMask, Volume, Voxels};
use crate::error::{Error, Result};

/// Inclusive voxel bounds per axis `(z, y, x)`. Bounds may lie outside the grid;
/// the outside part reads as zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VoxelBox {
    pub lo: [i64; 3],
    pub hi: [i64; 3],
}

impl VoxelBox {
    pub fn new(lo: [i64; 3], hi: [i64; 3]) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            lo: [0; 3],
            hi: dims.map(|d| d as i64 - 1),
        }
    }

    fn validate(&self) -> Result<()> {
        if (0..3).any(|a| self.hi[a] < self.lo[a]) {
            return Err(Error::InvalidBox(format!(
                "hi < lo in box {:?}..={:?}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn extent(&self) -> Dims {
        std::array::from_fn(|a| (self.hi[a] - self.lo[a] + 1) as usize)
    }

    pub fn voxel_count(&self) -> usize {
        self.extent().iter().product()
    }

    pub fn intersects(&self, dims: Dims) -> bool {
        (0..3).all(|a| self.lo[a] < dims[a] as i64 && self.hi[a] >= 0)
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    /// Grows each side by `by[axis]` voxels.
    pub fn dilate(&self, by: [i64; 3]) -> Self {
        Self {
            lo: std::array::from_fn(|a| self.lo[a] - by[a]),
            hi: std::array::from_fn(|a| self.hi[a] + by[a]),
        }
    }

    /// Clips to the grid `[0, dims)`; `None` if nothing remains.
    pub fn clamp_to(&self, dims: Dims) -> Option<Self> {
        if !self.intersects(dims) {
            return None;
        }
        Some(Self {
            lo: std::array::from_fn(|a| self.lo[a].max(0)),
            hi: std::array::from_fn(|a| self.hi[a].min(dims[a] as i64 - 1)),
        })
    }
}

/// Copies the in-grid part of `bbox` from `src` into a zeroed buffer of the box extent.
fn crop_slice<T: Copy + Default>(src: &[T], dims: Dims, bbox: &VoxelBox) -> Vec<T> {
    let ext = bbox.extent();
    let mut out = vec![T::default(); ext.iter().product()];
    let Some(inside) = bbox.clamp_to(dims) else {
        return out;
    };
    let (x0, x1) = (inside.lo[2] as usize, inside.hi[2] as usize);
    for z in inside.lo[0]..=inside.hi[0] {
        for y in inside.lo[1]..=inside.hi[1] {
            let s = flat_index(dims, z as usize, y as usize, x0);
            let d = flat_index(
                ext,
                (z - bbox.lo[0]) as usize,
                (y - bbox.lo[1]) as usize,
                (x0 as i64 - bbox.lo[2]) as usize,
            );
            out[d..d + (x1 - x0 + 1)].copy_from_slice(&src[s..s + (x1 - x0 + 1)]);
        }
    }
    out
}

/// Extracts `bbox` from `vol`; out-of-grid voxels are zero and spacing is kept.
pub fn crop(vol: &Volume, bbox: &VoxelBox) -> Result<Volume> {
    bbox.validate()?;
    if !bbox.intersects(vol.dims()) {
        return Err(Error::InvalidBox(format!(
            "box {:?}..={:?} misses grid {:?}",
            bbox.lo,
            bbox.hi,
            vol.dims()
        )));
    }
    let voxels = match vol.voxels() {
        Voxels::F32(v) => Voxels::F32(crop_slice(v, vol.dims(), bbox)),
        Voxels::U8(v) => Voxels::U8(crop_slice(v, vol.dims(), bbox)),
    };
    Volume::new(bbox.extent(), vol.spacing(), voxels)
}

pub fn crop_mask(mask: &LabelMask, bbox: &VoxelBox) -> Result<LabelMask> {
    LabelMask::try_from(crop(&mask.to_volume(), bbox)?)
}

/// Raw-slice crop used by the tensor paths (patch extraction).
pub fn crop_values<T: Copy + Default>(src: &[T], dims: Dims, bbox: &VoxelBox) -> Vec<T> {
    crop_slice(src, dims, bbox)
}

/// Writes `patch` (extent of `bbox`) into `dst` wherever the box overlaps the grid,
/// calling `write(dst_index, patch_index)`.
pub fn for_each_overlap(dims: Dims, bbox: &VoxelBox, mut write: impl FnMut(usize, usize)) {
    let ext = bbox.extent();
    let Some(inside) = bbox.clamp_to(dims) else {
        return;
    };
    for z in inside.lo[0]..=inside.hi[0] {
        for y in inside.lo[1]..=inside.hi[1] {
            for x in inside.lo[2]..=inside.hi[2] {
                let d = flat_index(dims, z as usize, y as usize, x as usize);
                let p = flat_index(
                    ext,
                    (z - bbox.lo[0]) as usize,
                    (y - bbox.lo[1]) as usize,
                    (x - bbox.lo[2]) as usize,
                );
                write(d, p);
            }
        }
    }
}
