//! Optimization: Adam, supervised-free pretraining and uncertainty-weighted
//! test-time adaptation.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffeo::{integrate_direction, warp, Direction, DisplacementField};
use crate::error::{Error, Result};
use crate::grid::ScalarVolume;
use crate::objective::{loss_value, total_loss, LossBreakdown, LossSettings, Regularize};
use crate::predictor::{forward, sample_dropout_mask, Gradients, PredictorParams};
use crate::rng::{derive_seed, label, rng_from_seed};
use crate::uncertainty::{uncertainty_map, ChannelAggregation, UncertaintyMap, DEFAULT_EPSILON};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Test-time adaptation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub lambda: f64,
    /// Squaring steps.
    pub steps: u32,
    pub mc_samples: usize,
    /// Optimization steps.
    pub adapt_steps: usize,
    pub lr: f64,
    pub dropout: f64,
    pub epsilon: f64,
    pub direction: Direction,
    pub seed: u64,
    #[serde(default)]
    pub regularize: Regularize,
    #[serde(default)]
    pub aggregation: ChannelAggregation,
    /// Recompute the weights every this many steps (never when `None`).
    #[serde(default)]
    pub refresh_uncertainty: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            steps: crate::diffeo::DEFAULT_STEPS,
            mc_samples: 20,
            adapt_steps: 30,
            lr: 2e-4,
            dropout: 0.2,
            epsilon: DEFAULT_EPSILON,
            direction: Direction::Forward,
            seed: 0,
            regularize: Regularize::Displacement,
            aggregation: ChannelAggregation::Sum,
            refresh_uncertainty: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(what));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if self.mc_samples < 2 {
            return bad(format!("{} MC samples; need >= 2", self.mc_samples));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be > 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be > 0", self.epsilon));
        }
        if self.refresh_uncertainty == Some(0) {
            return bad("refresh interval must be >= 1".into());
        }
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            lambda: self.lambda,
            steps: self.steps,
            direction: self.direction,
            regularize: self.regularize,
        }
    }
}

/// Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(params: &PredictorParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPSILON,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut PredictorParams, grads: &Gradients, state: &mut OptState, lr: f64) -> Result<()> {
    let mut blocks = params.blocks_mut();
    let shapes_ok = blocks.len() == grads.blocks.len()
        && blocks.len() == state.m.len()
        && blocks
            .iter()
            .zip(&grads.blocks)
            .zip(&state.m)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_ok {
        return Err(Error::InvalidArgument("gradient shapes do not match parameters".into()));
    }
    if grads.blocks.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (b, p) in blocks.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[b], &mut state.v[b], &grads.blocks[b]);
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Pretraining settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub loss: LossSettings,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 2e-4,
            loss: LossSettings::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Deterministic-pass loss averaged over the dataset before training.
    pub initial_loss: f64,
    /// Mean training loss of each epoch (dropout active).
    pub epoch_losses: Vec<f64>,
}

/// A fixed/moving pair.
pub type Pair = (ScalarVolume, ScalarVolume);

/// Minimize the unweighted loss over `dataset` one pair at a time, with a
/// fresh dropout mask per step and a shuffled order per epoch.
pub fn pretrain(
    params: &PredictorParams,
    dataset: &[Pair],
    cfg: &TrainConfig,
) -> Result<(PredictorParams, TrainReport)> {
    pretrain_with(params, dataset, cfg, |_, _| {})
}

/// [`pretrain`] with a per-epoch callback `(epoch, mean_loss)`.
pub fn pretrain_with(
    params: &PredictorParams,
    dataset: &[Pair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(PredictorParams, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be > 0", cfg.lr)));
    }
    let mut params = params.clone();
    let mut initial = 0.0;
    for (f, m) in dataset {
        initial += loss_value(f, m, &params, None, &cfg.loss, None)?.0.total;
    }
    let initial_loss = initial / dataset.len() as f64;

    let train_seed = derive_seed(cfg.seed, label::TRAIN);
    params.push_lineage(cfg.seed);
    let mut shuffle_rng = rng_from_seed(derive_seed(cfg.seed, label::SHUFFLE));
    let mut state = OptState::new(&params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = 0.0;
        for &i in &order {
            let (f, m) = &dataset[i];
            let mask = sample_dropout_mask(&params, derive_seed(train_seed, step));
            step += 1;
            let eval = total_loss(f, m, &params, Some(&mask), &cfg.loss, None)?;
            acc += eval.breakdown.total;
            adam_step(&mut params, &eval.gradients, &mut state, cfg.lr)?;
        }
        let mean = acc / dataset.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok((
        params,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

/// Output of [`adapt`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub config: AdaptConfig,
    /// Loss of every step, evaluated before that step's update.
    pub trajectory: Vec<LossBreakdown>,
    /// Loss of the returned parameters (unweighted terms use the same weights).
    pub final_loss: Option<LossBreakdown>,
    pub mean_variance: f64,
    pub max_variance: f64,
    /// Wall-clock seconds per step; not part of the reproducible output.
    #[serde(skip)]
    pub step_seconds: Vec<f64>,
    #[serde(skip)]
    pub uncertainty_seconds: f64,
}

/// Stepwise adaptation state for one image pair.
pub struct Adapter<'a> {
    fixed: &'a ScalarVolume,
    moving: &'a ScalarVolume,
    cfg: AdaptConfig,
    params: PredictorParams,
    opt: OptState,
    uncertainty: UncertaintyMap,
    refreshes: u64,
    report: AdaptReport,
}

impl<'a> Adapter<'a> {
    /// Draws the MC ensemble and fixes the weight map.
    pub fn new(
        params: &PredictorParams,
        fixed: &'a ScalarVolume,
        moving: &'a ScalarVolume,
        cfg: &AdaptConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        fixed.geometry().check_same(moving.geometry())?;
        let mut params = params.with_dropout(cfg.dropout)?;
        params.push_lineage(cfg.seed);
        let start = Instant::now();
        let uncertainty = Self::estimate(&params, fixed, moving, cfg, derive_seed(cfg.seed, label::MC))?;
        let report = AdaptReport {
            config: cfg.clone(),
            trajectory: Vec::with_capacity(cfg.adapt_steps),
            final_loss: None,
            mean_variance: uncertainty.variance.mean(),
            max_variance: uncertainty.variance.data().iter().cloned().fold(0.0, f64::max),
            step_seconds: Vec::with_capacity(cfg.adapt_steps),
            uncertainty_seconds: start.elapsed().as_secs_f64(),
        };
        Ok(Self {
            fixed,
            moving,
            cfg: cfg.clone(),
            opt: OptState::new(&params),
            params,
            uncertainty,
            refreshes: 0,
            report,
        })
    }

    fn estimate(
        params: &PredictorParams,
        fixed: &ScalarVolume,
        moving: &ScalarVolume,
        cfg: &AdaptConfig,
        seed: u64,
    ) -> Result<UncertaintyMap> {
        uncertainty_map(params, fixed, moving, cfg.mc_samples, seed, cfg.epsilon, cfg.aggregation)
    }

    pub fn params(&self) -> &PredictorParams {
        &self.params
    }

    pub fn uncertainty(&self) -> &UncertaintyMap {
        &self.uncertainty
    }

    pub fn steps_taken(&self) -> usize {
        self.report.trajectory.len()
    }

    /// One weighted-loss gradient step on a deterministic pass.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        if let Some(r) = self.cfg.refresh_uncertainty {
            let k = self.steps_taken();
            if k > 0 && k % r == 0 {
                self.refreshes += 1;
                let seed = derive_seed(derive_seed(self.cfg.seed, label::REFRESH), self.refreshes);
                self.uncertainty = Self::estimate(&self.params, self.fixed, self.moving, &self.cfg, seed)?;
            }
        }
        let start = Instant::now();
        let eval = total_loss(
            self.fixed,
            self.moving,
            &self.params,
            None,
            &self.cfg.loss_settings(),
            Some(&self.uncertainty.weights),
        )?;
        adam_step(&mut self.params, &eval.gradients, &mut self.opt, self.cfg.lr)?;
        if !self.params.is_finite() {
            return Err(Error::NonFinite("parameters"));
        }
        self.report.trajectory.push(eval.breakdown);
        self.report.step_seconds.push(start.elapsed().as_secs_f64());
        Ok(eval.breakdown)
    }

    /// Weighted loss of the current parameters.
    pub fn current_loss(&self) -> Result<LossBreakdown> {
        Ok(loss_value(
            self.fixed,
            self.moving,
            &self.params,
            None,
            &self.cfg.loss_settings(),
            Some(&self.uncertainty.weights),
        )?
        .0)
    }

    /// Register with the current parameters in the configured direction.
    pub fn register(&self) -> Result<(DisplacementField, ScalarVolume)> {
        register(&self.params, self.fixed, self.moving, self.cfg.direction, self.cfg.steps)
    }

    pub fn finish(mut self) -> Result<(PredictorParams, AdaptReport)> {
        self.report.final_loss = Some(self.current_loss()?);
        Ok((self.params, self.report))
    }
}

/// Uncertainty-aware test-time adaptation on a single pair. The input
/// parameters are left untouched.
pub fn adapt(
    params: &PredictorParams,
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    cfg: &AdaptConfig,
) -> Result<(PredictorParams, AdaptReport)> {
    let mut adapter = Adapter::new(params, fixed, moving, cfg)?;
    for _ in 0..cfg.adapt_steps {
        adapter.step()?;
    }
    if cfg.adapt_steps == 0 {
        // nothing was optimized; hand back the input unchanged
        let (_, report) = adapter.finish()?;
        return Ok((params.clone(), report));
    }
    adapter.finish()
}

/// Deterministic inference: displacement for `direction` and the warped
/// image (`moving` for forward, `fixed` for inverse).
pub fn register(
    params: &PredictorParams,
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    direction: Direction,
    steps: u32,
) -> Result<(DisplacementField, ScalarVolume)> {
    let (v, _) = forward(params, fixed, moving, None)?;
    let (u, _) = integrate_direction(&v, steps, direction)?;
    let source = match direction {
        Direction::Forward => moving,
        Direction::Inverse => fixed,
    };
    let warped = warp(source, &u)?;
    Ok((u, warped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;
    use crate::predictor::Architecture;

    fn scalar_params(value: f64) -> PredictorParams {
        let arch = Architecture {
            hidden: vec![],
            downsample: 1,
            leaky_slope: 0.2,
        };
        let p = PredictorParams::init(arch, 0.0, 0).unwrap();
        let mut blocks: Vec<Vec<f64>> = p.blocks().iter().map(|b| b.to_vec()).collect();
        blocks[0][0] = value;
        PredictorParams::from_blocks(p.architecture().clone(), 0.0, vec![0], blocks).unwrap()
    }

    fn grads_for(p: &PredictorParams, f: impl Fn(f64) -> f64) -> Gradients {
        let mut g = p.zero_gradients();
        g.blocks[0][0] = f(p.blocks()[0][0]);
        g
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_params(0.7);
        let before = p.clone();
        let mut s = OptState::new(&p);
        let zero = p.zero_gradients();
        adam_step(&mut p, &zero, &mut s, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_params(0.7);
        let mut s = OptState::new(&p);
        let g = grads_for(&p, |_| 3.5);
        adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        let moved = 0.7 - p.blocks()[0][0];
        // m̂ = g and v̂ = g², so the step is lr · g / (|g| + eps)
        assert!((moved - 0.01 * 3.5 / (3.5 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn converges_on_parabola() {
        let mut p = scalar_params(1.0);
        let mut s = OptState::new(&p);
        for _ in 0..100 {
            let g = grads_for(&p, |x| 2.0 * x);
            adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        }
        assert!(p.blocks()[0][0].abs() < 0.05, "{}", p.blocks()[0][0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar_params(1.0);
        let mut s = OptState::new(&p);
        let g = Gradients { blocks: vec![vec![0.0]] };
        assert!(adam_step(&mut p, &g, &mut s, 0.1).is_err());
    }

    fn pair(n: usize, shift: f64) -> Pair {
        let g = Geometry::cube([n, n, n]).unwrap();
        let blob = |c: [usize; 3], s: f64| {
            let d: f64 = c
                .iter()
                .enumerate()
                .map(|(a, &v)| {
                    let o = if a == 0 { s } else { 0.0 };
                    (v as f64 - n as f64 / 2.0 + 0.5 - o).powi(2)
                })
                .sum();
            (-(d / 8.0)).exp() * 1.6 - 0.8
        };
        (
            ScalarVolume::from_fn(g, |c| blob(c, 0.0)),
            ScalarVolume::from_fn(g, |c| blob(c, shift)),
        )
    }

    #[test]
    fn pretrain_initial_loss_is_mse_and_identical_pair_stays_zero() {
        let p = PredictorParams::init(Architecture::default(), 0.2, 1).unwrap();
        let data = vec![pair(8, 1.0), pair(8, -1.0)];
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let (_, rep) = pretrain(&p, &data, &cfg).unwrap();
        let mse: f64 = data
            .iter()
            .map(|(f, m)| crate::objective::mse_loss(f, m, None).unwrap().0)
            .sum::<f64>()
            / 2.0;
        assert!((rep.initial_loss - mse).abs() < 1e-15);
        assert_eq!(rep.epoch_losses.len(), 2);

        let same = pair(8, 0.0);
        let (_, rep) = pretrain(&p, &[(same.0.clone(), same.0.clone())], &cfg).unwrap();
        assert!(rep.initial_loss == 0.0 && rep.epoch_losses.iter().all(|&l| l < 1e-12));
        assert!(pretrain(&p, &[], &cfg).is_err());
    }

    #[test]
    fn pretraining_reduces_loss() {
        let p = PredictorParams::init(Architecture::default(), 0.2, 2).unwrap();
        let data = vec![pair(16, 1.5), pair(16, 2.0)];
        let cfg = TrainConfig {
            epochs: 30,
            lr: 2e-3,
            ..TrainConfig::default()
        };
        let (_, rep) = pretrain(&p, &data, &cfg).unwrap();
        assert!(*rep.epoch_losses.last().unwrap() < rep.initial_loss);
    }

    #[test]
    fn zero_steps_returns_input_and_empty_report() {
        let p = PredictorParams::init(Architecture::default(), 0.2, 3).unwrap();
        let (f, m) = pair(8, 1.0);
        let cfg = AdaptConfig {
            adapt_steps: 0,
            mc_samples: 3,
            ..AdaptConfig::default()
        };
        let (q, rep) = adapt(&p, &f, &m, &cfg).unwrap();
        assert_eq!(q, p);
        assert!(rep.trajectory.is_empty());
    }

    #[test]
    fn zero_dropout_first_step_is_unweighted_loss() {
        let mut p = PredictorParams::init(Architecture::default(), 0.0, 4).unwrap();
        let nb = p.blocks().len();
        p.blocks_mut()[nb - 2].iter_mut().enumerate().for_each(|(i, w)| *w = 1e-3 * ((i % 7) as f64 - 3.0));
        let (f, m) = pair(8, 1.0);
        let cfg = AdaptConfig {
            dropout: 0.0,
            adapt_steps: 1,
            mc_samples: 4,
            ..AdaptConfig::default()
        };
        let (_, rep) = adapt(&p, &f, &m, &cfg).unwrap();
        let (plain, _, _) = loss_value(&f, &m, &p, None, &cfg.loss_settings(), None).unwrap();
        let got = rep.trajectory[0];
        assert!((got.total - plain.total).abs() <= 1e-10 * plain.total.abs().max(1e-300));
        assert_eq!(rep.max_variance, 0.0);
    }

    #[test]
    fn adaptation_is_deterministic_and_does_not_mutate_input() {
        let p = PredictorParams::init(Architecture::default(), 0.2, 5).unwrap();
        let before = p.clone();
        let (f, m) = pair(8, 1.0);
        let cfg = AdaptConfig {
            adapt_steps: 3,
            mc_samples: 3,
            lr: 1e-3,
            ..AdaptConfig::default()
        };
        let (a, ra) = adapt(&p, &f, &m, &cfg).unwrap();
        let (b, rb) = adapt(&p, &f, &m, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(a, b);
        assert_eq!(ra.trajectory, rb.trajectory);
        assert_eq!(ra.final_loss, rb.final_loss);
        assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
        assert_eq!(ra.trajectory.len(), 3);
        assert_ne!(a, p);
    }

    #[test]
    fn refresh_changes_nothing_when_disabled_and_runs_when_enabled() {
        let p = PredictorParams::init(Architecture::default(), 0.2, 6).unwrap();
        let (f, m) = pair(8, 1.0);
        let cfg = AdaptConfig {
            adapt_steps: 4,
            mc_samples: 3,
            lr: 1e-3,
            refresh_uncertainty: Some(2),
            ..AdaptConfig::default()
        };
        let (_, rep) = adapt(&p, &f, &m, &cfg).unwrap();
        assert_eq!(rep.trajectory.len(), 4);
        let bad = AdaptConfig {
            refresh_uncertainty: Some(0),
            ..cfg
        };
        assert!(adapt(&p, &f, &m, &bad).is_err());
    }

    #[test]
    fn register_with_fresh_params_is_identity() {
        let p = PredictorParams::init(Architecture::default(), 0.2, 7).unwrap();
        let (f, m) = pair(8, 1.0);
        let (u, warped) = register(&p, &f, &m, Direction::Forward, 10).unwrap();
        assert!(u.field().data().iter().all(|&x| x == 0.0));
        assert_eq!(warped, m);
        let (_, warped) = register(&p, &f, &m, Direction::Inverse, 10).unwrap();
        assert_eq!(warped, f);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = AdaptConfig::default();
        for cfg in [
            AdaptConfig { lambda: -1.0, ..base.clone() },
            AdaptConfig { mc_samples: 1, ..base.clone() },
            AdaptConfig { lr: 0.0, ..base.clone() },
            AdaptConfig { dropout: 1.0, ..base.clone() },
            AdaptConfig { epsilon: 0.0, ..base.clone() },
        ] {
            assert!(cfg.validate().is_err());
        }
        assert!(base.validate().is_ok());
    }
}
