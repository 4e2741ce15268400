use super::components::{margin_voxels, mask_components};
use super::window::ProbMap;
use crate::error::{Error, Result};
use crate::volcore::{
    crop, crop_mask, for_each_overlap, resample_to_dims, Dims, Interpolation, LabelMask, Spacing, Volume,
    VoxelBox, LESION, ORGAN,
};

/// One organ region cut from the original grid for the fine stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiCrop {
    pub bbox: VoxelBox,
    pub image_crop: Volume,
    /// Binary coarse mask on the crop grid.
    pub prior_crop: LabelMask,
    pub source_component_id: u32,
}

/// Nearest-neighbour upsampling of a coarse mask onto `dims`, with the given spacing.
pub fn upsample_mask(mask: &LabelMask, dims: Dims, spacing: Spacing) -> Result<LabelMask> {
    let up = resample_to_dims(&mask.to_volume(), dims, Interpolation::Nearest)?;
    LabelMask::new(dims, spacing, up.as_u8().expect("u8 stays u8").to_vec())
}

/// One crop per component of the coarse mask, boxes dilated by `margin_mm`.
///
/// `image` is the normalized volume on the original grid.
pub fn extract_rois(stage1_mask_lowres: &LabelMask, image: &Volume, margin_mm: [f32; 3]) -> Result<Vec<RoiCrop>> {
    let prior = upsample_mask(&stage1_mask_lowres.binarized(), image.dims(), image.spacing())?;
    let by = margin_voxels(margin_mm, image.spacing());
    mask_components(&prior)
        .components
        .iter()
        .map(|c| {
            let bbox = c.bbox.dilate(by);
            Ok(RoiCrop {
                bbox,
                image_crop: crop(image, &bbox)?,
                prior_crop: crop_mask(&prior, &bbox)?,
                source_component_id: c.id,
            })
        })
        .collect()
}

/// Fine-stage result for one ROI.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPrediction {
    pub bbox: VoxelBox,
    pub probs: ProbMap,
    /// Final labels on the crop grid (argmax, possibly postprocessed).
    pub labels: LabelMask,
}

impl RoiPrediction {
    /// Labels taken as the plain argmax of `probs`.
    pub fn from_probs(bbox: VoxelBox, probs: ProbMap, spacing: Spacing) -> Result<Self> {
        let labels = probs.argmax(spacing)?;
        Self::new(bbox, probs, labels)
    }

    pub fn new(bbox: VoxelBox, probs: ProbMap, labels: LabelMask) -> Result<Self> {
        if probs.dims != bbox.extent() || labels.dims() != bbox.extent() {
            return Err(Error::Shape(format!(
                "ROI extent {:?} vs probs {:?} and labels {:?}",
                bbox.extent(),
                probs.dims,
                labels.dims()
            )));
        }
        if probs.channels <= usize::from(LESION) {
            return Err(Error::Shape(format!("ROI probabilities need 3 classes, got {}", probs.channels)));
        }
        Ok(Self { bbox, probs, labels })
    }
}

/// Writes ROI labels into an all-background canvas.
///
/// Where boxes overlap, the ROI with the higher lesion probability wins, then the
/// higher organ probability, then the earlier ROI.
pub fn restore_to_original(rois: &[RoiPrediction], dims: Dims, spacing: Spacing) -> Result<LabelMask> {
    let n: usize = dims.iter().product();
    let mut labels = vec![0u8; n];
    // (lesion prob, organ prob) of the current owner
    let mut owner: Vec<Option<(f32, f32)>> = vec![None; n];
    for roi in rois {
        let m = roi.probs.voxels();
        let lesion = &roi.probs.data[usize::from(LESION) * m..];
        let organ = &roi.probs.data[usize::from(ORGAN) * m..];
        let crop_labels = roi.labels.labels();
        for_each_overlap(dims, &roi.bbox, |d, p| {
            let key = (lesion[p], organ[p]);
            let wins = match owner[d] {
                None => true,
                Some((l, o)) => key.0 > l || (key.0 == l && key.1 > o),
            };
            if wins {
                owner[d] = Some(key);
                labels[d] = crop_labels[p];
            }
        });
    }
    LabelMask::new(dims, spacing, labels)
}
