//! Diffeomorphic machinery: scaling-and-squaring integration of stationary
//! velocity fields with exact reverse-mode gradients, displacement
//! composition, warping, inversion by negation and Jacobian statistics.
//!
//! A displacement `u` encodes the map `phi(x) = x + u(x)`; warping pulls
//! values back, `I_D(x) = I(x + u(x))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    field_gradient, sample_gradient, sample_with_jacobian, Geometry, ScalarVolume, Stencil,
    VectorField,
};

/// Default number of squaring steps.
pub const DEFAULT_STEPS: u32 = 10;

/// Registration pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "fwd")]
    Forward,
    #[serde(rename = "inv")]
    Inverse,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Inverse => "inv",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fwd" | "forward" => Ok(Direction::Forward),
            "inv" | "inverse" => Ok(Direction::Inverse),
            other => Err(Error::InvalidArgument(format!("unknown direction {other:?}"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `u(x) = phi(x) - x` together with how it was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    field: VectorField,
    direction: Direction,
    steps: u32,
}

impl DisplacementField {
    pub fn new(field: VectorField, direction: Direction, steps: u32) -> Result<Self> {
        if !field.is_finite() {
            return Err(Error::NonFinite("displacement field"));
        }
        Ok(Self {
            field,
            direction,
            steps,
        })
    }

    /// The identity transform.
    pub fn identity(geom: Geometry) -> Self {
        Self {
            field: VectorField::zeros(geom),
            direction: Direction::Forward,
            steps: 0,
        }
    }

    pub fn field(&self) -> &VectorField {
        &self.field
    }

    pub fn into_field(self) -> VectorField {
        self.field
    }

    pub fn geometry(&self) -> &Geometry {
        self.field.geometry()
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }
}

/// Intermediate displacements `u^0 .. u^{K-1}` (the inputs of each squaring).
#[derive(Clone, Debug)]
pub struct IntegrationTape {
    stages: Vec<VectorField>,
    geom: Geometry,
}

impl IntegrationTape {
    pub fn steps(&self) -> usize {
        self.stages.len()
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }
}

/// `r(x) = outer(x + inner(x)) + inner(x)`.
/// Calls `f(i, x + u(x))` for every voxel in memory order.
#[inline]
fn for_each_sample_point(geom: &Geometry, u: &[f64], mut f: impl FnMut(usize, [f64; 3])) {
    let [nx, ny, nz] = geom.dims;
    let n = geom.len();
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                f(i, [x as f64 + u[i], y as f64 + u[n + i], z as f64 + u[2 * n + i]]);
                i += 1;
            }
        }
    }
}

fn compose_fields(outer: &VectorField, inner: &VectorField) -> VectorField {
    let geom = *inner.geometry();
    let n = geom.len();
    let od = outer.data();
    let id = inner.data();
    let mut out = vec![0.0; 3 * n];
    for_each_sample_point(&geom, id, |i, p| {
        let s = Stencil::at(&geom.dims, p).apply3(od, n);
        out[i] = s[0] + id[i];
        out[n + i] = s[1] + id[n + i];
        out[2 * n + i] = s[2] + id[2 * n + i];
    });
    VectorField::new(geom, out).expect("same geometry")
}

/// Displacement of `phi_outer ∘ phi_inner`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    outer.geometry().check_same(inner.geometry())?;
    DisplacementField::new(
        compose_fields(&outer.field, &inner.field),
        inner.direction,
        inner.steps,
    )
}

/// Scaling and squaring: `u^0 = v / 2^K`, then `K` self-compositions.
pub fn integrate_svf(v: &VectorField, steps: u32) -> Result<(DisplacementField, IntegrationTape)> {
    integrate_tagged(v, steps, Direction::Forward)
}

fn integrate_tagged(
    v: &VectorField,
    steps: u32,
    direction: Direction,
) -> Result<(DisplacementField, IntegrationTape)> {
    if steps > 60 {
        return Err(Error::InvalidArgument(format!("{steps} squaring steps")));
    }
    if !v.is_finite() {
        return Err(Error::NonFinite("velocity field"));
    }
    let mut u = v.scaled(1.0 / (1u64 << steps) as f64);
    let mut stages = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let next = compose_fields(&u, &u);
        stages.push(u);
        u = next;
    }
    let tape = IntegrationTape {
        stages,
        geom: *v.geometry(),
    };
    Ok((DisplacementField::new(u, direction, steps)?, tape))
}

/// Reverse-mode of [`integrate_svf`]: maps `dL/du` to `dL/dv`.
///
/// Each squaring `u'(x) = u(x + u(x)) + u(x)` contributes a pass-through
/// term, the sampling adjoint onto the outer field, and the transposed
/// spatial Jacobian of the interpolated field at the sample point.
pub fn integrate_svf_backward(tape: &IntegrationTape, dl_du: &VectorField) -> Result<VectorField> {
    tape.geom.check_same(dl_du.geometry())?;
    let geom = tape.geom;
    let n = geom.len();
    let mut g = dl_du.data().to_vec();
    for u in tape.stages.iter().rev() {
        if u.geometry().dims != geom.dims {
            return Err(Error::TapeMismatch("stage geometry".into()));
        }
        let ud = u.data();
        let mut next = g.clone();
        for_each_sample_point(&geom, ud, |i, p| {
            let gi = [g[i], g[n + i], g[2 * n + i]];
            if gi == [0.0; 3] {
                return;
            }
            let (st, _, jac) = sample_with_jacobian(&geom.dims, ud, n, p);
            for d in 0..3 {
                next[d * n + i] += gi[0] * jac[0][d] + gi[1] * jac[1][d] + gi[2] * jac[2][d];
            }
            for (ch, &gc) in gi.iter().enumerate() {
                st.scatter(&mut next[ch * n..(ch + 1) * n], gc);
            }
        });
        g = next;
    }
    let scale = 1.0 / (1u64 << tape.stages.len()) as f64;
    g.iter_mut().for_each(|v| *v *= scale);
    VectorField::new(geom, g)
}

/// Pull-back warp `I_D(x) = img(x + u(x))`.
pub fn warp(img: &ScalarVolume, u: &DisplacementField) -> Result<ScalarVolume> {
    warp_field(img, u.field())
}

pub(crate) fn warp_field(img: &ScalarVolume, u: &VectorField) -> Result<ScalarVolume> {
    let geom = *img.geometry();
    geom.check_same(u.geometry())?;
    let n = geom.len();
    let ud = u.data();
    let mut data = vec![0.0; n];
    for_each_sample_point(&geom, ud, |i, p| {
        data[i] = Stencil::at(&geom.dims, p).apply(img.data());
    });
    ScalarVolume::new(geom, data)
}

/// Gradient of a loss with respect to the displacement, given its gradient
/// with respect to the warped image.
pub fn warp_backward(
    img: &ScalarVolume,
    u: &VectorField,
    dl_dwarped: &ScalarVolume,
) -> Result<VectorField> {
    let geom = *img.geometry();
    geom.check_same(u.geometry())?;
    geom.check_same(dl_dwarped.geometry())?;
    let n = geom.len();
    let ud = u.data();
    let gd = dl_dwarped.data();
    let mut out = vec![0.0; 3 * n];
    for_each_sample_point(&geom, ud, |i, p| {
        if gd[i] == 0.0 {
            return;
        }
        let grad = sample_gradient(&geom.dims, img.data(), p);
        for d in 0..3 {
            out[d * n + i] = gd[i] * grad[d];
        }
    });
    VectorField::new(geom, out)
}

/// Inverse transform obtained by integrating the negated velocity field.
pub fn invert_via_negation(v: &VectorField, steps: u32) -> Result<DisplacementField> {
    Ok(integrate_tagged(&v.neg(), steps, Direction::Inverse)?.0)
}

/// Integrate `v` for a given pathway (`-v` for the inverse).
pub fn integrate_direction(
    v: &VectorField,
    steps: u32,
    direction: Direction,
) -> Result<(DisplacementField, IntegrationTape)> {
    match direction {
        Direction::Forward => integrate_tagged(v, steps, direction),
        Direction::Inverse => integrate_tagged(&v.neg(), steps, direction),
    }
}

#[inline]
pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Per-voxel `det(I + grad u)` using central differences (one-sided at faces).
pub fn jacobian_determinant(u: &DisplacementField) -> Result<ScalarVolume> {
    jacobian_determinant_field(u.field())
}

pub(crate) fn jacobian_determinant_field(u: &VectorField) -> Result<ScalarVolume> {
    let geom = *u.geometry();
    let rows = field_gradient(u);
    let data = (0..geom.len())
        .map(|i| {
            let m: [[f64; 3]; 3] = std::array::from_fn(|c| {
                let g = rows[c].at(i);
                std::array::from_fn(|d| g[d] + if c == d { 1.0 } else { 0.0 })
            });
            det3(&m)
        })
        .collect();
    ScalarVolume::new(geom, data)
}

/// Percentage of voxels inside `mask` with a negative Jacobian determinant.
pub fn folding_fraction(jac: &ScalarVolume, mask: &ScalarVolume) -> Result<f64> {
    jac.geometry().check_same(mask.geometry())?;
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidArgument("mask must be binary".into()));
    }
    let (mut inside, mut folded) = (0usize, 0usize);
    for (&j, &m) in jac.data().iter().zip(mask.data()) {
        if m == 1.0 {
            inside += 1;
            if j < 0.0 {
                folded += 1;
            }
        }
    }
    if inside == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(100.0 * folded as f64 / inside as f64)
}
