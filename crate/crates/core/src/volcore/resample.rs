use serde::{Deserialize, Serialize};

use super::volume::{Dims, Spacing, Volume, Voxels};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Output extent for one axis: `max(1, round(n * spacing / target))`, half away from zero.
pub fn resampled_len(n: usize, spacing: f32, target: f32) -> usize {
    let exact = n as f64 * f64::from(spacing) / f64::from(target);
    (exact.round() as usize).max(1)
}

/// Source coordinate of output sample `j` on an axis scaled from `n_in` to `n_out`
/// samples, keeping the physical extent fixed and clamping to the edge voxels.
#[inline]
fn source_coord(j: usize, n_in: usize, n_out: usize) -> f64 {
    let scale = n_in as f64 / n_out as f64;
    ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64)
}

/// Per output sample: (lower index, upper index, upper weight).
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|j| {
            let s = source_coord(j, n_in, n_out);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|j| ((source_coord(j, n_in, n_out) + 0.5).floor() as usize).min(n_in - 1))
        .collect()
}

/// Strides and extents needed to walk `axis` as the middle of three loops.
fn axis_layout(dims: Dims, axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

fn linear_axis(data: &[f32], dims: Dims, axis: usize, n_out: usize) -> Vec<f32> {
    let (outer, n_in, inner) = axis_layout(dims, axis);
    let taps = linear_taps(n_in, n_out);
    let mut out = vec![0.0f32; outer * n_out * inner];
    for o in 0..outer {
        for (j, &(lo, hi, w)) in taps.iter().enumerate() {
            let dst = &mut out[(o * n_out + j) * inner..][..inner];
            let a = &data[(o * n_in + lo) * inner..][..inner];
            let b = &data[(o * n_in + hi) * inner..][..inner];
            if w == 0.0 {
                dst.copy_from_slice(a);
            } else {
                for ((d, &va), &vb) in dst.iter_mut().zip(a).zip(b) {
                    *d = (f64::from(va) * (1.0 - w) + f64::from(vb) * w) as f32;
                }
            }
        }
    }
    out
}

fn nearest_axis<T: Copy + Default>(data: &[T], dims: Dims, axis: usize, n_out: usize) -> Vec<T> {
    let (outer, n_in, inner) = axis_layout(dims, axis);
    let taps = nearest_taps(n_in, n_out);
    let mut out = vec![T::default(); outer * n_out * inner];
    for o in 0..outer {
        for (j, &src) in taps.iter().enumerate() {
            out[(o * n_out + j) * inner..][..inner]
                .copy_from_slice(&data[(o * n_in + src) * inner..][..inner]);
        }
    }
    out
}

/// Resamples `vol` to `target_spacing`.
///
/// Linear mode is separable trilinear interpolation with clamp-to-edge sampling and is
/// rejected for `u8` volumes; label data must use nearest-neighbour.
pub fn resample(vol: &Volume, target_spacing: Spacing, mode: Interpolation) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Misuse(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let in_dims = vol.dims();
    let out_dims: Dims =
        std::array::from_fn(|a| resampled_len(in_dims[a], vol.spacing()[a], target_spacing[a]));
    resample_grid(vol, out_dims, target_spacing, mode)
}

/// Resamples to explicit output dims, keeping the physical extent.
pub fn resample_to_dims(vol: &Volume, out_dims: Dims, mode: Interpolation) -> Result<Volume> {
    let in_dims = vol.dims();
    let spacing: Spacing = std::array::from_fn(|a| {
        (f64::from(vol.spacing()[a]) * in_dims[a] as f64 / out_dims[a] as f64) as f32
    });
    resample_grid(vol, out_dims, spacing, mode)
}

fn resample_grid(vol: &Volume, out_dims: Dims, spacing: Spacing, mode: Interpolation) -> Result<Volume> {
    let in_dims = vol.dims();
    let voxels = match (vol.voxels(), mode) {
        (Voxels::U8(_), Interpolation::Linear) => {
            return Err(Error::Misuse(
                "linear interpolation of a uint8 label volume".into(),
            ))
        }
        (Voxels::F32(d), Interpolation::Linear) => {
            Voxels::F32(separable(d.clone(), in_dims, out_dims, linear_axis))
        }
        (Voxels::F32(d), Interpolation::Nearest) => {
            Voxels::F32(separable(d.clone(), in_dims, out_dims, nearest_axis))
        }
        (Voxels::U8(d), Interpolation::Nearest) => {
            Voxels::U8(separable(d.clone(), in_dims, out_dims, nearest_axis))
        }
    };
    Volume::new(out_dims, spacing, voxels)
}

fn separable<T>(
    mut data: Vec<T>,
    in_dims: Dims,
    out_dims: Dims,
    pass: impl Fn(&[T], Dims, usize, usize) -> Vec<T>,
) -> Vec<T> {
    let mut dims = in_dims;
    for axis in 0..3 {
        if dims[axis] != out_dims[axis] {
            data = pass(&data, dims, axis, out_dims[axis]);
            dims[axis] = out_dims[axis];
        }
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resample() {
        let data: Vec<f32> = (0..60).map(|i| i as f32 * 0.37).collect();
        let vol = Volume::from_f32([3, 4, 5], [2.0, 1.0, 1.0], data).unwrap();
        let out = resample(&vol, [2.0, 1.0, 1.0], Interpolation::Linear).unwrap();
        assert_eq!(out, vol);
    }

    #[test]
    fn doubling_slice_spacing_halves_z() {
        assert_eq!(resampled_len(138, 1.5, 3.0), 69);
        assert_eq!(resampled_len(512, 0.8, 0.8), 512);
        assert_eq!(resampled_len(3, 1.0, 2.0), 2); // 1.5 rounds away from zero
        assert_eq!(resampled_len(1, 1.0, 5.0), 1);
    }

    #[test]
    fn constant_stays_constant() {
        let vol = Volume::filled([5, 6, 7], [1.0, 1.0, 1.0], 4.25).unwrap();
        for target in [[2.0, 0.7, 1.3], [0.5, 3.0, 1.0]] {
            let out = resample(&vol, target, Interpolation::Linear).unwrap();
            assert!(out.as_f32().unwrap().iter().all(|&v| v == 4.25));
            assert_eq!(out.spacing(), target);
        }
    }

    #[test]
    fn linear_on_labels_is_misuse() {
        let vol = Volume::from_u8([2, 2, 2], [1.0; 3], vec![1; 8]).unwrap();
        assert!(matches!(
            resample(&vol, [2.0, 1.0, 1.0], Interpolation::Linear),
            Err(Error::Misuse(_))
        ));
        let out = resample(&vol, [2.0, 1.0, 1.0], Interpolation::Nearest).unwrap();
        assert_eq!(out.dims(), [1, 2, 2]);
        assert_eq!(out.as_u8().unwrap(), &[1, 1, 1, 1]);
    }

    #[test]
    fn nearest_upsample_replicates() {
        let vol = Volume::from_u8([2, 1, 1], [2.0, 1.0, 1.0], vec![1, 2]).unwrap();
        let out = resample(&vol, [1.0, 1.0, 1.0], Interpolation::Nearest).unwrap();
        assert_eq!(out.as_u8().unwrap(), &[1, 1, 2, 2]);
    }

    #[test]
    fn smooth_round_trip_within_tolerance() {
        let dims = [64, 6, 40];
        let mut data = Vec::new();
        for z in 0..dims[0] {
            for _y in 0..dims[1] {
                for x in 0..dims[2] {
                    let fz = (std::f64::consts::PI * z as f64 / (dims[0] - 1) as f64).cos();
                    let fx = (std::f64::consts::PI * x as f64 / (dims[2] - 1) as f64).cos();
                    data.push((fz + 0.5 * fx) as f32);
                }
            }
        }
        let vol = Volume::from_f32(dims, [1.0, 1.0, 1.0], data.clone()).unwrap();
        let down = resample(&vol, [2.0, 1.0, 1.0], Interpolation::Linear).unwrap();
        assert_eq!(down.dims(), [32, 6, 40]);
        let back = resample(&down, [1.0, 1.0, 1.0], Interpolation::Linear).unwrap();
        assert_eq!(back.dims(), dims);
        let (lo, hi) = data
            .iter()
            .fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let err = back
            .as_f32()
            .unwrap()
            .iter()
            .zip(&data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1e-3 * (hi - lo), "max err {err}");
    }
}
