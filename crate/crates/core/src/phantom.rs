//! Synthetic inhale/exhale phantom pairs with a known deformation.
//!
//! The moving image is a textured ellipsoidal "lung" with bright
//! vessel-like curves. The ground-truth velocity is a radial field
//! `-ln(s) (x - c)` on the lung (feathered to zero outside it) plus a smooth
//! random perturbation. Pulling the moving image back through the resulting
//! expansion shrinks the lung by `s` per axis, so the fixed image plays the
//! exhaled scan.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffeo::{integrate_svf, warp, DisplacementField};
use crate::error::{Error, Result};
use crate::eval::{folding_percent, warp_mask, BinaryMask};
use crate::grid::{blur_in_place, gaussian_blur, Dims, Geometry, ScalarVolume, VectorField};
use crate::rng::{derive_seed, label, rng_from_seed};

/// Voxel size of generated phantoms in mm.
pub const PHANTOM_SPACING: f64 = 1.5;
const MAX_ATTEMPTS: usize = 5;
/// Lung semi-axes as fractions of the grid size.
const SEMI_AXES: [f64; 3] = [0.25, 0.22, 0.27];
/// Radial field is exact up to this normalized radius, zero beyond `FEATHER_END`.
const FEATHER_START: f64 = 1.1;
const FEATHER_END: f64 = 1.75;

/// White noise smoothed by a Gaussian of `smoothness` voxels, rescaled so the
/// largest vector has length `amplitude`.
pub fn smooth_random_svf(dims: Dims, amplitude: f64, smoothness: f64, seed: u64) -> Result<VectorField> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::InvalidArgument(format!("amplitude {amplitude} must be >= 0")));
    }
    if !(smoothness >= 1.0 && smoothness.is_finite()) {
        return Err(Error::InvalidArgument(format!("smoothness {smoothness} must be >= 1")));
    }
    let geom = Geometry::cube(dims)?;
    if amplitude == 0.0 {
        return Ok(VectorField::zeros(geom));
    }
    let mut rng = rng_from_seed(seed);
    let n = geom.len();
    let mut data: Vec<f64> = (0..3 * n).map(|_| rng.sample(StandardNormal)).collect();
    for c in 0..3 {
        blur_in_place(&mut data[c * n..(c + 1) * n], &dims, smoothness)?;
    }
    let field = VectorField::new(geom, data)?;
    let max = field.max_magnitude();
    if max == 0.0 {
        return Ok(VectorField::zeros(geom));
    }
    Ok(field.scaled(amplitude / max))
}

/// Deformation parameters of a phantom pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deformation {
    /// Per-axis contraction of the lung from moving to fixed, in [0.5, 1].
    pub radial_scale: f64,
    /// Largest length of the random perturbation, in voxels.
    pub random_amplitude: f64,
    /// Gaussian width of the random perturbation, in voxels.
    pub smoothness: f64,
}

impl Default for Deformation {
    fn default() -> Self {
        Self {
            radial_scale: 0.8,
            random_amplitude: 1.0,
            smoothness: 4.0,
        }
    }
}

/// A generated pair with masks and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub fixed: ScalarVolume,
    pub moving: ScalarVolume,
    pub fixed_mask: BinaryMask,
    pub moving_mask: BinaryMask,
    pub v_gt: VectorField,
    /// `1 - |fixed mask| / |moving mask|`.
    pub delta_v_analog: f64,
    pub deformation: Deformation,
    pub seed: u64,
    /// Perturbation amplitude actually used (halved on every folding retry).
    pub used_amplitude: f64,
    pub attempts: usize,
}

fn normalized_radius(geom: &Geometry, c: [usize; 3]) -> f64 {
    let ctr = geom.center();
    (0..3)
        .map(|a| ((c[a] as f64 - ctr[a]) / (SEMI_AXES[a] * geom.dims[a] as f64)).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn feather(rho: f64) -> f64 {
    if rho <= FEATHER_START {
        1.0
    } else if rho >= FEATHER_END {
        0.0
    } else {
        let t = (rho - FEATHER_START) / (FEATHER_END - FEATHER_START);
        (0.5 * std::f64::consts::PI * t).cos().powi(2)
    }
}

/// Radial velocity whose flow scales the lung by `1 / radial_scale`.
pub fn radial_svf(geom: &Geometry, radial_scale: f64) -> VectorField {
    let k = -radial_scale.ln();
    let ctr = geom.center();
    VectorField::from_fn(*geom, |c| {
        let w = k * feather(normalized_radius(geom, c));
        std::array::from_fn(|a| w * (c[a] as f64 - ctr[a]))
    })
}

fn unit_normal<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let d: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if len > 1e-6 {
            return d.map(|v| v / len);
        }
    }
}

fn point_segment_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
    let ap: [f64; 3] = std::array::from_fn(|i| p[i] - a[i]);
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum()
}

/// Textured lung on a soft-tissue background, in [-1, 1].
fn lung_image<R: Rng>(geom: &Geometry, rng: &mut R) -> Result<ScalarVolume> {
    let dims = geom.dims;
    let n = geom.len();
    let scale = dims.iter().copied().min().expect("3 dims") as f64 / 48.0;

    let mut texture: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    blur_in_place(&mut texture, &dims, 2.5 * scale.max(0.5))?;
    let sd = (texture.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    texture.iter_mut().for_each(|v| *v /= sd);

    let mut vessels = vec![0.0f64; n];
    let radius = 0.9 * scale.max(0.6);
    let reach = 3.0 * radius;
    let ctr = geom.center();
    let semi: [f64; 3] = std::array::from_fn(|a| SEMI_AXES[a] * dims[a] as f64);
    let inside = |p: [f64; 3]| {
        (0..3).map(|a| ((p[a] - ctr[a]) / semi[a]).powi(2)).sum::<f64>().sqrt()
    };
    for _ in 0..10 {
        let mut p: [f64; 3] = loop {
            let q: [f64; 3] = std::array::from_fn(|a| ctr[a] + rng.random_range(-0.4..0.4) * semi[a]);
            if inside(q) < 0.4 {
                break q;
            }
        };
        let mut dir = unit_normal(rng);
        let step = 1.5 * scale.max(0.6);
        for _ in 0..40 {
            let bend = unit_normal(rng);
            let mut nd: [f64; 3] = std::array::from_fn(|i| dir[i] + 0.35 * bend[i]);
            let len = (nd.iter().map(|v| v * v).sum::<f64>()).sqrt();
            nd.iter_mut().for_each(|v| *v /= len);
            dir = nd;
            let q: [f64; 3] = std::array::from_fn(|i| p[i] + step * dir[i]);
            if inside(q) > 0.92 {
                break;
            }
            let lo: [usize; 3] = std::array::from_fn(|a| (p[a].min(q[a]) - reach).floor().max(0.0) as usize);
            let hi: [usize; 3] =
                std::array::from_fn(|a| ((p[a].max(q[a]) + reach).ceil() as usize).min(dims[a] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let d2 = point_segment_dist2([x as f64, y as f64, z as f64], p, q);
                        let val = (-d2 / (2.0 * radius * radius)).exp();
                        let i = geom.index(x, y, z);
                        vessels[i] = vessels[i].max(val);
                    }
                }
            }
            p = q;
        }
    }

    let edge = 1.2 / semi.iter().copied().fold(f64::INFINITY, f64::min);
    let img = ScalarVolume::from_fn(*geom, |c| {
        let rho = normalized_radius(geom, c);
        let i = geom.index(c[0], c[1], c[2]);
        let lung = 1.0 / (1.0 + ((rho - 1.0) / edge).exp());
        let inner = -0.75 + 0.12 * texture[i] + 0.65 * vessels[i];
        let outer = 0.05 * texture[i];
        lung * inner + (1.0 - lung) * outer
    });
    Ok(gaussian_blur(&img, 0.6)?.map(|v| v.clamp(-1.0, 1.0)))
}

/// Generate one phantom pair on a `dims` grid with 1.5 mm voxels.
///
/// Folding of the ground truth inside the fixed mask triggers a retry with
/// the random amplitude halved, at most five attempts in total.
pub fn make_phantom_pair(dims: Dims, deformation: Deformation, seed: u64) -> Result<PhantomCase> {
    if !(0.5..=1.0).contains(&deformation.radial_scale) {
        return Err(Error::InvalidArgument(format!(
            "radial scale {} outside [0.5, 1]",
            deformation.radial_scale
        )));
    }
    if dims.iter().any(|&d| d < 24) {
        return Err(Error::InvalidDims(format!("phantoms need dims >= 24, got {dims:?}")));
    }
    let geom = Geometry::new(dims, [PHANTOM_SPACING; 3])?;
    let base = derive_seed(seed, label::PHANTOM);
    let mut rng = rng_from_seed(base);
    let moving = lung_image(&geom, &mut rng)?;
    let moving_mask = BinaryMask::from_fn(geom, |c| normalized_radius(&geom, c) <= 1.0);
    let radial = radial_svf(&geom, deformation.radial_scale);

    let mut amplitude = deformation.random_amplitude;
    for attempt in 1..=MAX_ATTEMPTS {
        let noise = smooth_random_svf(dims, amplitude, deformation.smoothness, derive_seed(base, attempt as u64))?;
        let v_gt = VectorField::new(geom, radial.add(&noise)?.into_data())?;
        let (u, _) = integrate_svf(&v_gt, crate::diffeo::DEFAULT_STEPS)?;
        let fixed_mask = warp_mask(&moving_mask, &u)?;
        if fixed_mask.is_empty() {
            return Err(Error::EmptyRegion);
        }
        if folding_percent(&u, &fixed_mask)? > 0.0 {
            log::warn!("phantom {seed}: folding at amplitude {amplitude}, retrying");
            amplitude *= 0.5;
            continue;
        }
        let fixed = warp(&moving, &u)?;
        let delta_v_analog = 1.0 - fixed_mask.count() as f64 / moving_mask.count() as f64;
        return Ok(PhantomCase {
            fixed,
            moving,
            fixed_mask,
            moving_mask,
            v_gt,
            delta_v_analog,
            deformation,
            seed,
            used_amplitude: amplitude,
            attempts: attempt,
        });
    }
    Err(Error::InvalidArgument(format!(
        "phantom {seed}: ground truth still folds after {MAX_ATTEMPTS} attempts"
    )))
}

impl PhantomCase {
    /// Ground-truth displacement for the forward pathway.
    pub fn ground_truth(&self) -> Result<DisplacementField> {
        Ok(integrate_svf(&self.v_gt, crate::diffeo::DEFAULT_STEPS)?.0)
    }
}
