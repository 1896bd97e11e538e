//! Image similarity, bending energy and the full training loss with
//! gradients back to the predictor parameters.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffeo::{integrate_svf, integrate_svf_backward, warp_backward, warp_field, Direction, DisplacementField};
use crate::error::{Error, Result};
use crate::grid::{sum, ScalarVolume, VectorField};
use crate::predictor::{backward, forward, DropoutMask, Gradients, PredictorParams};

/// Which field the bending penalty is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularize {
    #[default]
    Displacement,
    Velocity,
}

impl FromStr for Regularize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "displacement" => Ok(Self::Displacement),
            "velocity" => Ok(Self::Velocity),
            other => Err(Error::InvalidArgument(format!("unknown regularization target {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub bending: f64,
    pub total: f64,
    pub lambda: f64,
    pub weighted: bool,
}

impl LossBreakdown {
    pub fn new(mse: f64, bending: f64, lambda: f64, weighted: bool) -> Self {
        Self {
            mse,
            bending,
            total: mse + lambda * bending,
            lambda,
            weighted,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mse.is_finite() && self.bending.is_finite() && self.total.is_finite()
    }
}

/// Settings shared by pretraining and adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub lambda: f64,
    pub steps: u32,
    pub direction: Direction,
    pub regularize: Regularize,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            steps: crate::diffeo::DEFAULT_STEPS,
            direction: Direction::Forward,
            regularize: Regularize::Displacement,
        }
    }
}

/// `(1/|Ω|) Σ w (I_F - I_D)²` and its gradient with respect to `I_D`.
/// `weights = None` means `w ≡ 1`.
pub fn mse_loss(
    fixed: &ScalarVolume,
    warped: &ScalarVolume,
    weights: Option<&ScalarVolume>,
) -> Result<(f64, ScalarVolume)> {
    fixed.geometry().check_same(warped.geometry())?;
    if let Some(w) = weights {
        fixed.geometry().check_same(w.geometry())?;
        if w.data().iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidArgument("weights must be finite and >= 0".into()));
        }
    }
    let n = fixed.geometry().len() as f64;
    let w_at = |i: usize| weights.map_or(1.0, |w| w.data()[i]);
    let resid: Vec<f64> = fixed.data().iter().zip(warped.data()).map(|(f, d)| f - d).collect();
    let terms: Vec<f64> = resid.iter().enumerate().map(|(i, r)| w_at(i) * r * r).collect();
    let grad = resid.iter().enumerate().map(|(i, r)| -2.0 / n * w_at(i) * r).collect();
    Ok((sum(&terms) / n, ScalarVolume::new(*fixed.geometry(), grad)?))
}

/// Squared Frobenius norm of the Hessian of every component, summed over
/// voxels at least one voxel away from every face and divided by the total
/// voxel count. Returns the value and its exact gradient.
pub fn bending_energy(u: &VectorField) -> Result<(f64, VectorField)> {
    let geom = *u.geometry();
    let [nx, ny, nz] = geom.dims;
    if geom.dims.iter().any(|&d| d < 3) {
        return Err(Error::InvalidDims(format!("bending energy needs dims >= 3, got {:?}", geom.dims)));
    }
    let n = geom.len();
    let inv_n = 1.0 / n as f64;
    let (sy, sz) = (nx, nx * ny);
    let mut grad = vec![0.0; 3 * n];
    let mut per_voxel = Vec::with_capacity(3 * (nx - 2) * (ny - 2) * (nz - 2));
    for c in 0..3 {
        let d = u.channel(c);
        let g = &mut grad[c * n..(c + 1) * n];
        for z in 1..nz - 1 {
            for y in 1..ny - 1 {
                for x in 1..nx - 1 {
                    let i = x + sy * y + sz * z;
                    let c0 = 2.0 * d[i];
                    let xx = d[i - 1] - c0 + d[i + 1];
                    let yy = d[i - sy] - c0 + d[i + sy];
                    let zz = d[i - sz] - c0 + d[i + sz];
                    let xy = 0.25 * (d[i + 1 + sy] - d[i + 1 - sy] - d[i - 1 + sy] + d[i - 1 - sy]);
                    let xz = 0.25 * (d[i + 1 + sz] - d[i + 1 - sz] - d[i - 1 + sz] + d[i - 1 - sz]);
                    let yz = 0.25 * (d[i + sy + sz] - d[i + sy - sz] - d[i - sy + sz] + d[i - sy - sz]);
                    per_voxel.push(xx * xx + yy * yy + zz * zz + 2.0 * (xy * xy + xz * xz + yz * yz));

                    let k = 2.0 * inv_n;
                    for (v, s) in [(xx, 1), (yy, sy), (zz, sz)] {
                        let gv = k * v;
                        g[i - s] += gv;
                        g[i] -= 2.0 * gv;
                        g[i + s] += gv;
                    }
                    // mixed terms carry weight 2 and stencil coefficient 1/4
                    for (v, a, b) in [(xy, 1, sy), (xz, 1, sz), (yz, sy, sz)] {
                        let gv = k * v * 0.5;
                        g[i + a + b] += gv;
                        g[i + a - b] -= gv;
                        g[i - a + b] -= gv;
                        g[i - a - b] += gv;
                    }
                }
            }
        }
    }
    Ok((sum(&per_voxel) * inv_n, VectorField::new(geom, grad)?))
}

/// Everything computed by one evaluation of the training loss.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub breakdown: LossBreakdown,
    pub gradients: Gradients,
    /// Displacement used to warp (the inverse one for the inverse pathway).
    pub displacement: DisplacementField,
    pub warped: ScalarVolume,
}

/// Full loss for one pair and its gradient with respect to every parameter.
///
/// The network always sees `(fixed, moving)`. Forward compares
/// `moving ∘ SS(v)` against `fixed`; inverse compares `fixed ∘ SS(-v)`
/// against `moving`.
pub fn total_loss(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    params: &PredictorParams,
    mask: Option<&DropoutMask>,
    settings: &LossSettings,
    weights: Option<&ScalarVolume>,
) -> Result<LossEval> {
    let (eval, grads) = evaluate(fixed, moving, params, mask, settings, weights, true)?;
    Ok(LossEval {
        gradients: grads.expect("requested"),
        ..eval
    })
}

/// Loss value, displacement and warped image without the backward pass.
pub fn loss_value(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    params: &PredictorParams,
    mask: Option<&DropoutMask>,
    settings: &LossSettings,
    weights: Option<&ScalarVolume>,
) -> Result<(LossBreakdown, DisplacementField, ScalarVolume)> {
    let (eval, _) = evaluate(fixed, moving, params, mask, settings, weights, false)?;
    Ok((eval.breakdown, eval.displacement, eval.warped))
}

fn evaluate(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    params: &PredictorParams,
    mask: Option<&DropoutMask>,
    settings: &LossSettings,
    weights: Option<&ScalarVolume>,
    with_grad: bool,
) -> Result<(LossEval, Option<Gradients>)> {
    if !(settings.lambda >= 0.0 && settings.lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda {} must be >= 0", settings.lambda)));
    }
    let (v, ptape) = forward(params, fixed, moving, mask)?;
    let sign = match settings.direction {
        Direction::Forward => 1.0,
        Direction::Inverse => -1.0,
    };
    let signed_v = if sign > 0.0 { v } else { v.neg() };
    let (u, ss_tape) = integrate_svf(&signed_v, settings.steps)?;
    let (target, source) = match settings.direction {
        Direction::Forward => (fixed, moving),
        Direction::Inverse => (moving, fixed),
    };
    let warped = warp_field(source, u.field())?;
    let (mse, g_warped) = mse_loss(target, &warped, weights)?;
    let bend_input = match settings.regularize {
        Regularize::Displacement => u.field(),
        Regularize::Velocity => &signed_v,
    };
    let (bending, g_bend) = bending_energy(bend_input)?;
    let breakdown = LossBreakdown::new(mse, bending, settings.lambda, weights.is_some());
    if !breakdown.is_finite() {
        return Err(Error::NonFinite("loss"));
    }

    if !with_grad {
        let displacement = DisplacementField::new(u.into_field(), settings.direction, settings.steps)?;
        let eval = LossEval {
            breakdown,
            gradients: Gradients { blocks: Vec::new() },
            displacement,
            warped,
        };
        return Ok((eval, None));
    }
    let mut dl_du = warp_backward(source, u.field(), &g_warped)?;
    if settings.regularize == Regularize::Displacement {
        dl_du = dl_du.add(&g_bend.scaled(settings.lambda))?;
    }
    let mut dl_dsv = integrate_svf_backward(&ss_tape, &dl_du)?;
    if settings.regularize == Regularize::Velocity {
        dl_dsv = dl_dsv.add(&g_bend.scaled(settings.lambda))?;
    }
    let dl_dv = if sign > 0.0 { dl_dsv } else { dl_dsv.neg() };
    let gradients = backward(params, &ptape, &dl_dv)?;
    let displacement = DisplacementField::new(u.into_field(), settings.direction, settings.steps)?;
    let eval = LossEval {
        breakdown,
        gradients: Gradients { blocks: Vec::new() },
        displacement,
        warped,
    };
    Ok((eval, Some(gradients)))
}
