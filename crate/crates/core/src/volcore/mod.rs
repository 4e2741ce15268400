//! Volumes, label masks, the MVOL file format, grid resampling, cropping and
//! synthetic phantoms.

mod crop;
mod mvol;
mod phantom;
mod resample;
mod volume;

pub use crop::{crop, crop_mask, crop_values, for_each_overlap, VoxelBox};
pub use mvol::{decode_mvol, encode_mvol, read_mvol, write_mvol, HEADER_LEN as MVOL_HEADER_LEN};
pub use phantom::{phantom_geometry, DEFAULT_PHANTOM_SPACING, synth_phantom, Ellipsoid, PhantomGeometry, PhantomSpec};
pub use resample::{resample, resample_to_dims, resampled_len, Interpolation};
pub use volume::{
    flat_index, DType, Dims, LabelMask, Spacing, Volume, Voxels, BACKGROUND, LESION, MAX_LABEL,
    ORGAN,
};
