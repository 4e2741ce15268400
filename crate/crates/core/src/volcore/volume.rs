use crate::error::{Error, Result};

/// Grid extent as `(z, y, x)`.
pub type Dims = [usize; 3];
/// Per-axis voxel size in millimetres, `(z, y, x)`.
pub type Spacing = [f32; 3];

pub(crate) fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Flat x-fastest offset of `(z, y, x)`.
#[inline]
pub fn flat_index(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

fn check_grid(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Shape(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Voxel payload; the variant doubles as the dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum Voxels {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Voxels {
    pub fn len(&self) -> usize {
        match self {
            Voxels::F32(v) => v.len(),
            Voxels::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Voxels::F32(_) => DType::F32,
            Voxels::U8(_) => DType::U8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

/// Scalar field on a regular grid. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    voxels: Voxels,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, voxels: Voxels) -> Result<Self> {
        check_grid(dims, spacing)?;
        if voxels.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "voxel count {} does not match dims {:?}",
                voxels.len(),
                dims
            )));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn from_f32(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, spacing, Voxels::F32(data))
    }

    pub fn from_u8(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, spacing, Voxels::U8(data))
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Result<Self> {
        Self::from_f32(dims, spacing, vec![value; voxel_count(dims)])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn dtype(&self) -> DType {
        self.voxels.dtype()
    }

    pub fn voxels(&self) -> &Voxels {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Voxel at `(z, y, x)` widened to `f32`.
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        let i = flat_index(self.dims, z, y, x);
        match &self.voxels {
            Voxels::F32(v) => v[i],
            Voxels::U8(v) => f32::from(v[i]),
        }
    }

    /// All voxels widened to `f32`.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.voxels {
            Voxels::F32(v) => v.clone(),
            Voxels::U8(v) => v.iter().map(|&b| f32::from(b)).collect(),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.voxels {
            Voxels::F32(v) => Some(v),
            Voxels::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.voxels {
            Voxels::U8(v) => Some(v),
            Voxels::F32(_) => None,
        }
    }

    pub fn into_voxels(self) -> Voxels {
        self.voxels
    }
}

/// Label volume with values in `{0 = background, 1 = organ, 2 = lesion}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    dims: Dims,
    spacing: Spacing,
    labels: Vec<u8>,
}

pub const BACKGROUND: u8 = 0;
pub const ORGAN: u8 = 1;
pub const LESION: u8 = 2;
pub const MAX_LABEL: u8 = LESION;

impl LabelMask {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u8>) -> Result<Self> {
        check_grid(dims, spacing)?;
        if labels.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "label count {} does not match dims {:?}",
                labels.len(),
                dims
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > MAX_LABEL) {
            return Err(Error::Format(format!("label value {bad} outside {{0,1,2}}")));
        }
        Ok(Self {
            dims,
            spacing,
            labels,
        })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0; voxel_count(dims)])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[flat_index(self.dims, z, y, x)]
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    /// Foreground indicator: any label >= 1.
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != BACKGROUND).collect()
    }

    /// Collapses organ and lesion into a single label 1.
    pub fn binarized(&self) -> LabelMask {
        LabelMask {
            dims: self.dims,
            spacing: self.spacing,
            labels: self.labels.iter().map(|&l| u8::from(l != 0)).collect(),
        }
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            voxels: Voxels::U8(self.labels.clone()),
        }
    }
}

impl TryFrom<Volume> for LabelMask {
    type Error = Error;

    fn try_from(vol: Volume) -> Result<Self> {
        let (dims, spacing) = (vol.dims, vol.spacing);
        match vol.voxels {
            Voxels::U8(labels) => LabelMask::new(dims, spacing, labels),
            Voxels::F32(_) => Err(Error::Format("label mask must be uint8".into())),
        }
    }
}

impl From<LabelMask> for Volume {
    fn from(mask: LabelMask) -> Self {
        Volume {
            dims: mask.dims,
            spacing: mask.spacing,
            voxels: Voxels::U8(mask.labels),
        }
    }
}
