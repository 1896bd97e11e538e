//! Overlap and surface-distance metrics, mask warping and inverse
//! consistency.
//!
//! Surfaces are 6-connected inner surfaces: mask voxels with at least one
//! face neighbour outside the mask (the outside of the grid counts as
//! outside). Distances are in millimetres, displacements in voxels.

use serde::{Deserialize, Serialize};

use crate::diffeo::{compose, folding_fraction, jacobian_determinant, warp, Direction, DisplacementField};
use crate::error::{Error, Result};
use crate::grid::{Geometry, ScalarVolume};

/// A strictly {0, 1} volume.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    vol: ScalarVolume,
}

impl BinaryMask {
    pub fn new(vol: ScalarVolume) -> Result<Self> {
        if vol.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { vol })
    }

    /// Values `>= threshold` become 1.
    pub fn threshold(vol: &ScalarVolume, threshold: f64) -> Self {
        Self {
            vol: vol.map(|v| if v >= threshold { 1.0 } else { 0.0 }),
        }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        Self {
            vol: ScalarVolume::from_fn(geom, |c| if f(c) { 1.0 } else { 0.0 }),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        self.vol.geometry()
    }

    pub fn volume(&self) -> &ScalarVolume {
        &self.vol
    }

    pub fn into_volume(self) -> ScalarVolume {
        self.vol
    }

    pub fn contains(&self, i: usize) -> bool {
        self.vol.data()[i] != 0.0
    }

    pub fn count(&self) -> usize {
        self.vol.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Inner surface voxels.
    pub fn surface(&self) -> Vec<bool> {
        let g = self.geometry();
        let [nx, ny, nz] = g.dims;
        let d = self.vol.data();
        (0..g.len())
            .map(|i| {
                if d[i] == 0.0 {
                    return false;
                }
                let [x, y, z] = g.coords(i);
                x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || d[i - 1] == 0.0
                    || d[i + 1] == 0.0
                    || d[i - nx] == 0.0
                    || d[i + nx] == 0.0
                    || d[i - nx * ny] == 0.0
                    || d[i + nx * ny] == 0.0
            })
            .collect()
    }
}

/// Trilinear warp of the mask followed by a 0.5 threshold (ties map to 1).
pub fn warp_mask(mask: &BinaryMask, u: &DisplacementField) -> Result<BinaryMask> {
    let warped = warp(mask.volume(), u)?;
    Ok(BinaryMask::threshold(&warped, 0.5))
}

/// `2|A ∩ B| / (|A| + |B|)`.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.geometry().check_same(b.geometry())?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Err(Error::EmptyRegion);
    }
    let both = (0..a.geometry().len()).filter(|&i| a.contains(i) && b.contains(i)).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

const FAR: f64 = f64::INFINITY;

/// Squared distance transform of one line (`h` = voxel size), in place.
fn edt_line(f: &mut [f64], h: f64, v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q] == FAR {
            continue;
        }
        let fq = f[q] + (q as f64 * h).powi(2);
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + (p as f64 * h).powi(2);
                    let s = (fq - fp) / (2.0 * h * (q - p) as f64);
                    if s <= *z.last().expect("paired") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let src: Vec<f64> = v.iter().map(|&p| f[p]).collect();
    let mut k = 0;
    for (q, out) in f.iter_mut().enumerate() {
        let xq = q as f64 * h;
        while k + 1 < v.len() && z[k + 1] < xq {
            k += 1;
        }
        let d = xq - v[k] as f64 * h;
        *out = src[k] + d * d;
    }
}

/// Exact Euclidean distance (mm) from every voxel to the nearest surface
/// voxel of `mask`.
pub fn edt(mask: &BinaryMask) -> Result<ScalarVolume> {
    let geom = *mask.geometry();
    let surf = mask.surface();
    if !surf.iter().any(|&s| s) {
        return Err(Error::EmptyRegion);
    }
    let mut d: Vec<f64> = surf.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let [nx, ny, _] = geom.dims;
    let strides = [1, nx, nx * ny];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let len = geom.dims[axis];
        let stride = strides[axis];
        let h = geom.spacing[axis];
        let mut line = vec![0.0; len];
        for start in 0..geom.len() {
            let c = [start % nx, (start / nx) % ny, start / (nx * ny)];
            if c[axis] != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = d[start + k * stride];
            }
            edt_line(&mut line, h, &mut v, &mut z);
            for (k, l) in line.iter().enumerate() {
                d[start + k * stride] = *l;
            }
        }
    }
    ScalarVolume::new(geom, d.into_iter().map(f64::sqrt).collect())
}

/// Average symmetric surface distance in mm.
pub fn assd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.geometry().check_same(b.geometry())?;
    let (sa, sb) = (a.surface(), b.surface());
    let (da, db) = (edt(a)?, edt(b)?);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..sa.len() {
        if sa[i] {
            total += db.data()[i];
            count += 1;
        }
        if sb[i] {
            total += da.data()[i];
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean over `region` of `|φ_fwd∘φ_inv - id|` and `|φ_inv∘φ_fwd - id|`,
/// averaged, in voxels.
pub fn inverse_consistency_error(
    u_fwd: &DisplacementField,
    u_inv: &DisplacementField,
    region: &BinaryMask,
) -> Result<f64> {
    u_fwd.geometry().check_same(region.geometry())?;
    let n = region.count();
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    let ab = compose(u_fwd, u_inv)?.into_field().magnitude();
    let ba = compose(u_inv, u_fwd)?.into_field().magnitude();
    let mut total = 0.0;
    for i in 0..region.geometry().len() {
        if region.contains(i) {
            total += 0.5 * (ab.data()[i] + ba.data()[i]);
        }
    }
    Ok(total / n as f64)
}

/// Percentage of `region` voxels with a non-positive Jacobian determinant.
pub fn folding_percent(u: &DisplacementField, region: &BinaryMask) -> Result<f64> {
    folding_fraction(&jacobian_determinant(u)?, region.volume())
}

/// Metrics of one registration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    pub direction: Direction,
    pub dsc: f64,
    pub assd_mm: f64,
    pub folding_pct: f64,
    pub inv_consistency_vox: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "case_id,direction,dsc,assd_mm,folding_pct,inv_consistency_vox";

    pub fn csv_row(&self) -> String {
        let ic = self.inv_consistency_vox.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{:.6},{}",
            self.case_id, self.direction, self.dsc, self.assd_mm, self.folding_pct, ic
        )
    }
}

/// Compare `target` against `warped` and measure folding of `u` inside
/// `target`.
pub fn evaluate(
    case_id: &str,
    target: &BinaryMask,
    warped: &BinaryMask,
    u: &DisplacementField,
    inverse_of_u: Option<&DisplacementField>,
) -> Result<MetricsReport> {
    let inv_consistency_vox = match inverse_of_u {
        Some(w) => Some(inverse_consistency_error(u, w, target)?),
        None => None,
    };
    Ok(MetricsReport {
        case_id: case_id.to_string(),
        direction: u.direction(),
        dsc: dice(target, warped)?,
        assd_mm: assd(target, warped)?,
        folding_pct: folding_percent(u, target)?,
        inv_consistency_vox,
    })
}

/// Register the masks of a case with `u` in its direction and evaluate:
/// forward warps the moving mask onto the fixed one, inverse the fixed mask
/// onto the moving one.
pub fn evaluate_registration(
    case_id: &str,
    fixed_mask: &BinaryMask,
    moving_mask: &BinaryMask,
    u: &DisplacementField,
    inverse_of_u: Option<&DisplacementField>,
) -> Result<MetricsReport> {
    let (target, source) = match u.direction() {
        Direction::Forward => (fixed_mask, moving_mask),
        Direction::Inverse => (moving_mask, fixed_mask),
    };
    let warped = warp_mask(source, u)?;
    evaluate(case_id, target, &warped, u, inverse_of_u)
}
