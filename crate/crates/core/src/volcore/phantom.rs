//! Synthetic abdominal phantoms: axis-aligned organ ellipsoids with one spherical
//! lesion, plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::volume::{Dims, LabelMask, Spacing, Volume, LESION, ORGAN};
use crate::error::{Error, Result};

/// Organ semi-axes are drawn from this fraction range of the grid's physical extent.
const ORGAN_RADIUS_FRAC: (f64, f64) = (0.12, 0.2);
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    #[serde(default = "default_organ_count")]
    pub organ_count: usize,
    #[serde(default = "default_lesion_frac")]
    pub lesion_radius_frac: f64,
    /// Mean intensity of (background, organ, lesion).
    #[serde(default = "default_levels")]
    pub intensity_levels: [f32; 3],
    #[serde(default = "default_noise")]
    pub noise_sigma: f32,
    pub seed: u64,
}

fn default_organ_count() -> usize {
    2
}
fn default_lesion_frac() -> f64 {
    0.45
}
fn default_levels() -> [f32; 3] {
    [40.0, 180.0, 110.0]
}
fn default_noise() -> f32 {
    20.0
}

impl PhantomSpec {
    pub fn new(dims: Dims, spacing: Spacing, seed: u64) -> Self {
        Self {
            dims,
            spacing,
            organ_count: default_organ_count(),
            lesion_radius_frac: default_lesion_frac(),
            intensity_levels: default_levels(),
            noise_sigma: default_noise(),
            seed,
        }
    }

    /// Spec for case `index` of a series drawn from `seed`.
    pub fn for_case(dims: Dims, spacing: Spacing, seed: u64, index: u64) -> Self {
        Self::new(dims, spacing, series_seed(seed, index))
    }
}

/// Voxel size used for synthetic case series (slice axis twice as coarse).
pub const DEFAULT_PHANTOM_SPACING: Spacing = [2.0, 1.0, 1.0];

/// SplitMix64 finalizer over `seed` and `index`.
fn series_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ellipsoid in millimetre coordinates (voxel `i` has its centre at `i * spacing`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn bounding_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }
}

/// Geometry drawn for one phantom, kept for tests and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGeometry {
    pub organs: Vec<Ellipsoid>,
    /// Lesion sphere centre (mm), radius (mm), and the organ index hosting it.
    pub lesion_center: [f64; 3],
    pub lesion_radius: f64,
    pub lesion_host: usize,
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    if spec.dims.contains(&0) || spec.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Misuse("phantom dims and spacing must be positive".into()));
    }
    if spec.organ_count == 0 {
        return Err(Error::Misuse("organ_count must be at least 1".into()));
    }
    if !(spec.lesion_radius_frac > 0.0 && spec.lesion_radius_frac < 1.0) {
        return Err(Error::Misuse("lesion_radius_frac must lie in (0, 1)".into()));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::Misuse("noise_sigma must be >= 0".into()));
    }
    Ok(())
}

fn place_organs(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Ellipsoid>> {
    let extent: [f64; 3] =
        std::array::from_fn(|a| spec.dims[a] as f64 * f64::from(spec.spacing[a]));
    let mut organs: Vec<Ellipsoid> = Vec::with_capacity(spec.organ_count);
    for k in 0..spec.organ_count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let radii: [f64; 3] = std::array::from_fn(|a| {
                extent[a] * rng.gen_range(ORGAN_RADIUS_FRAC.0..ORGAN_RADIUS_FRAC.1)
            });
            // keep one voxel of background between the organ and the border
            let mut center = [0.0; 3];
            let mut fits = true;
            for a in 0..3 {
                let lo = radii[a] + f64::from(spec.spacing[a]);
                let hi = extent[a] - radii[a] - 2.0 * f64::from(spec.spacing[a]);
                if hi <= lo {
                    fits = false;
                    break;
                }
                center[a] = rng.gen_range(lo..hi);
            }
            if !fits {
                continue;
            }
            let candidate = Ellipsoid { center, radii };
            let clear = organs.iter().all(|o| {
                let d2: f64 = (0..3).map(|a| (o.center[a] - center[a]).powi(2)).sum();
                d2.sqrt() > o.bounding_radius() + candidate.bounding_radius()
            });
            if clear {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(e) => organs.push(e),
            None => {
                return Err(Error::Placement(format!(
                    "could not place organ {} of {} in grid {:?} after {MAX_PLACEMENT_ATTEMPTS} attempts",
                    k + 1,
                    spec.organ_count,
                    spec.dims
                )))
            }
        }
    }
    Ok(organs)
}

/// Draws the phantom geometry without rasterizing it.
pub fn phantom_geometry(spec: &PhantomSpec) -> Result<PhantomGeometry> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    geometry_with(spec, &mut rng)
}

fn geometry_with(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<PhantomGeometry> {
    validate(spec)?;
    let organs = place_organs(spec, rng)?;
    let host = rng.gen_range(0..organs.len());
    let organ = organs[host];
    // centre drawn uniformly from the host ellipsoid shrunk by half
    let offset = loop {
        let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            break u;
        }
    };
    let lesion_center = std::array::from_fn(|a| organ.center[a] + 0.5 * offset[a] * organ.radii[a]);
    let min_radius = organ.radii.iter().copied().fold(f64::MAX, f64::min);
    Ok(PhantomGeometry {
        organs,
        lesion_center,
        lesion_radius: spec.lesion_radius_frac * min_radius,
        lesion_host: host,
    })
}

/// Rasterizes a deterministic phantom image and its label mask.
pub fn synth_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geom = geometry_with(spec, &mut rng)?;
    let [nz, ny, nx] = spec.dims;
    let sp = spec.spacing.map(f64::from);
    let mut labels = vec![0u8; nz * ny * nx];
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [z as f64 * sp[0], y as f64 * sp[1], x as f64 * sp[2]];
                let d2: f64 = (0..3).map(|a| (p[a] - geom.lesion_center[a]).powi(2)).sum();
                labels[i] = if d2 <= geom.lesion_radius * geom.lesion_radius {
                    LESION
                } else if geom.organs.iter().any(|o| o.contains(p)) {
                    ORGAN
                } else {
                    0
                };
                i += 1;
            }
        }
    }
    let levels = spec.intensity_levels;
    let mut image: Vec<f32> = labels.iter().map(|&l| levels[usize::from(l)]).collect();
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sigma)
            .map_err(|e| Error::Misuse(format!("noise distribution: {e}")))?;
        for v in &mut image {
            *v += normal.sample(&mut rng);
        }
    }
    Ok((
        Volume::from_f32(spec.dims, spec.spacing, image)?,
        LabelMask::new(spec.dims, spec.spacing, labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn noiseless_image_has_three_levels() {
        let mut spec = PhantomSpec::new([24, 48, 48], [2.0, 1.0, 1.0], 3);
        spec.noise_sigma = 0.0;
        let (img, mask) = synth_phantom(&spec).unwrap();
        let values: BTreeSet<u32> = img.as_f32().unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(values.len(), 3);
        assert!(mask.count(1) > 0 && mask.count(2) > 0);
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = PhantomSpec::new([16, 32, 32], [2.0, 1.0, 1.0], 11);
        assert_eq!(synth_phantom(&spec).unwrap(), synth_phantom(&spec).unwrap());
        let other = PhantomSpec { seed: 12, ..spec.clone() };
        assert_ne!(synth_phantom(&spec).unwrap().1, synth_phantom(&other).unwrap().1);
    }

    #[test]
    fn lesion_volume_matches_sphere() {
        // analytic sphere volume vs voxel count on an isotropic grid
        for seed in 0..5 {
            let mut spec = PhantomSpec::new([64, 64, 64], [1.0; 3], seed);
            spec.organ_count = 1;
            spec.lesion_radius_frac = 0.6;
            let geom = phantom_geometry(&spec).unwrap();
            let (_, mask) = synth_phantom(&spec).unwrap();
            let analytic = 4.0 / 3.0 * std::f64::consts::PI * geom.lesion_radius.powi(3);
            let counted = mask.count(2) as f64;
            assert!(
                (counted - analytic).abs() <= 0.15 * analytic,
                "seed {seed}: counted {counted}, analytic {analytic}"
            );
        }
    }

    #[test]
    fn organs_disjoint_and_lesion_hosted() {
        for seed in 0..20 {
            let spec = PhantomSpec::new([48, 96, 96], [2.0, 1.0, 1.0], seed);
            let g = phantom_geometry(&spec).unwrap();
            assert_eq!(g.organs.len(), 2);
            assert!(g.organs[g.lesion_host].contains(g.lesion_center));
            let (a, b) = (g.organs[0], g.organs[1]);
            let d: f64 = (0..3).map(|i| (a.center[i] - b.center[i]).powi(2)).sum::<f64>().sqrt();
            assert!(d > a.bounding_radius() + b.bounding_radius());
        }
    }

    #[test]
    fn tiny_grid_fails_placement() {
        let spec = PhantomSpec { organ_count: 2, ..PhantomSpec::new([3, 3, 3], [1.0; 3], 0) };
        assert!(matches!(synth_phantom(&spec), Err(Error::Placement(_))));
    }
}
