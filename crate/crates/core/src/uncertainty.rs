//! Monte Carlo dropout ensembles and variance-based voxel weights.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{resample_to_dims, Dims, Geometry, ScalarVolume, VectorField};
use crate::predictor::{forward_coarse, sample_dropout_mask, PredictorParams};
use crate::rng::derive_seed;

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Coarse-grid velocity samples from stochastic forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct McEnsemble {
    pub fields: Vec<VectorField>,
    pub seeds: Vec<u64>,
    /// Geometry of the images the ensemble was drawn for.
    pub image_geometry: Geometry,
}

impl McEnsemble {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// How the three per-channel variances collapse to one value per voxel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelAggregation {
    #[default]
    Sum,
    Mean,
    Max,
}

impl FromStr for ChannelAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::InvalidArgument(format!("unknown channel aggregation {other:?}"))),
        }
    }
}

/// Variance and the derived loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    /// Channel-aggregated variance on the coarse grid.
    pub variance: ScalarVolume,
    /// Mean-one weights on the image grid.
    pub weights: ScalarVolume,
    pub epsilon: f64,
}

/// `count` dropout passes with masks seeded by `derive_seed(seed, i)`.
pub fn mc_sample(
    params: &PredictorParams,
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    count: usize,
    seed: u64,
) -> Result<McEnsemble> {
    if count == 0 {
        return Err(Error::InvalidArgument("need at least one MC sample".into()));
    }
    let mut fields = Vec::with_capacity(count);
    let mut seeds = Vec::with_capacity(count);
    for i in 0..count {
        let s = derive_seed(seed, i as u64);
        let mask = sample_dropout_mask(params, s);
        let tape = forward_coarse(params, fixed, moving, Some(&mask))?;
        fields.push(tape.coarse_svf().clone());
        seeds.push(s);
    }
    Ok(McEnsemble {
        fields,
        seeds,
        image_geometry: *fixed.geometry(),
    })
}

/// Population mean and channel-summed population variance.
pub fn mean_variance(ens: &McEnsemble) -> Result<(VectorField, ScalarVolume)> {
    mean_variance_with(ens, ChannelAggregation::Sum)
}

pub fn mean_variance_with(ens: &McEnsemble, agg: ChannelAggregation) -> Result<(VectorField, ScalarVolume)> {
    if ens.len() < 2 {
        return Err(Error::InsufficientSamples);
    }
    let geom = *ens.fields[0].geometry();
    for f in &ens.fields[1..] {
        geom.check_same(f.geometry())?;
    }
    let count = ens.len() as f64;
    // deviations are taken from the first sample so identical samples give
    // exactly zero variance
    let base = ens.fields[0].data();
    let mut shift = vec![0.0; base.len()];
    for f in &ens.fields[1..] {
        for ((m, v), b) in shift.iter_mut().zip(f.data()).zip(base) {
            *m += v - b;
        }
    }
    shift.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; base.len()];
    for f in &ens.fields {
        for (((s, v), b), m) in var.iter_mut().zip(f.data()).zip(base).zip(&shift) {
            let d = (v - b) - m;
            *s += d * d;
        }
    }
    let mean: Vec<f64> = base.iter().zip(&shift).map(|(b, m)| b + m).collect();
    var.iter_mut().for_each(|s| *s /= count);
    let n = geom.len();
    let agg_data = (0..n)
        .map(|i| {
            let c = [var[i], var[n + i], var[2 * n + i]];
            match agg {
                ChannelAggregation::Sum => c[0] + c[1] + c[2],
                ChannelAggregation::Mean => (c[0] + c[1] + c[2]) / 3.0,
                ChannelAggregation::Max => c[0].max(c[1]).max(c[2]),
            }
        })
        .collect();
    Ok((VectorField::new(geom, mean)?, ScalarVolume::new(geom, agg_data)?))
}

/// Weights `1 / (σ² + ε)`, resampled to `image_dims` when given, scaled to
/// mean one.
pub fn weight_map(variance: &ScalarVolume, epsilon: f64, image_dims: Option<Dims>) -> Result<ScalarVolume> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be > 0")));
    }
    if variance.data().iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument("variance must be finite and >= 0".into()));
    }
    let raw = variance.map(|s| 1.0 / (s + epsilon));
    let raw = match image_dims {
        Some(d) => resample_to_dims(&raw, d)?,
        None => raw,
    };
    let mean = raw.mean();
    Ok(raw.map(|w| w / mean))
}

/// MC sampling followed by variance and weights on the image grid.
pub fn uncertainty_map(
    params: &PredictorParams,
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    count: usize,
    seed: u64,
    epsilon: f64,
    agg: ChannelAggregation,
) -> Result<UncertaintyMap> {
    let ens = mc_sample(params, fixed, moving, count, seed)?;
    let (_, variance) = mean_variance_with(&ens, agg)?;
    let mut weights = weight_map(&variance, epsilon, Some(fixed.dims()))?;
    // keep the image spacing exactly
    weights = ScalarVolume::new(*fixed.geometry(), weights.into_data())?;
    Ok(UncertaintyMap {
        variance,
        weights,
        epsilon,
    })
}
