//! Error analysis of a trained solver and error-corrected training.
//!
//! With `δz = z − ẑ` and residual `ℓ = dẑ/dt − F(ẑ)`, the error obeys
//! `δż = F(ẑ + δz) − F(ẑ) − ℓ`. Truncating the Taylor series of `F` about
//! `ẑ` and stepping explicitly on a fine grid gives an estimate of `δz`
//! from quantities the network can evaluate by itself. Adding it to `ẑ`
//! yields supervised targets that are cheap to train against: no time
//! derivative and no `F` evaluation per iteration.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LossGrad, MlpParams};
use crate::systems::SystemDef;
use crate::training::{
    batch_rng, sample_batch, train_step, Monitor, Optimizer, OptimizerConfig, Phase, StopReason, TrainConfig,
    TrainRecord, WeightSnapshot,
};

/// Singular values at or below this make the error bound vacuous.
pub const DEFAULT_SIGMA_EPS: f64 = 1e-12;
/// Estimator aborts once `|δz|` exceeds this multiple of the error bound.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

/// Residuals `ℓ(t_n)` of the current network on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualProfile {
    pub times: Vec<f64>,
    pub step: f64,
    pub z_hat: Vec<Vec<f64>>,
    pub residuals: Vec<Vec<f64>>,
    pub l_max: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Uniform grid `0, Δt, …, T`; `Δt` must divide `T`.
pub fn uniform_grid(grid_step: f64, horizon: f64) -> Result<Vec<f64>> {
    if !(grid_step > 0.0 && horizon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "grid step {grid_step} and horizon {horizon} must be positive"
        )));
    }
    let n = (horizon / grid_step).round();
    if n < 1.0 || (n * grid_step - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "grid step {grid_step} does not divide horizon {horizon}"
        )));
    }
    let n = n as usize;
    Ok((0..=n).map(|i| horizon * i as f64 / n as f64).collect())
}

pub fn residual_profile(
    params: &MlpParams,
    z0: &[f64],
    system: &SystemDef,
    grid_step: f64,
    horizon: f64,
) -> Result<ResidualProfile> {
    let times = uniform_grid(grid_step, horizon)?;
    let mut z_hat = Vec::with_capacity(times.len());
    let mut residuals = Vec::with_capacity(times.len());
    let mut l_max = 0.0f64;
    for &t in &times {
        let out = params.forward(t, z0);
        let f = system.f(&out.z_hat);
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t });
        }
        let r: Vec<f64> = out.z_hat_dot.iter().zip(&f).map(|(a, b)| a - b).collect();
        l_max = l_max.max(norm(&r));
        residuals.push(r);
        z_hat.push(out.z_hat);
    }
    Ok(ResidualProfile {
        step: horizon / (times.len() - 1) as f64,
        times,
        z_hat,
        residuals,
        l_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    pub l_max: f64,
    pub sigma_min: f64,
    /// `ℓ_max / σ_min`, or `+∞` when vacuous.
    pub bound: f64,
    /// Jacobian near-singular on the trajectory.
    pub vacuous: bool,
}

pub fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// `ℓ_max / σ_min` with `σ_min` the smallest singular value of `F_z` over
/// the profile grid.
pub fn error_bound(profile: &ResidualProfile, system: &SystemDef) -> ErrorBound {
    error_bound_with(profile, system, DEFAULT_SIGMA_EPS)
}

pub fn error_bound_with(profile: &ResidualProfile, system: &SystemDef, sigma_eps: f64) -> ErrorBound {
    let sigma_min = profile
        .z_hat
        .iter()
        .map(|z| smallest_singular_value(&system.jacobian(z)))
        .fold(f64::INFINITY, f64::min);
    let vacuous = sigma_min <= sigma_eps;
    let bound = if profile.l_max == 0.0 {
        0.0
    } else if vacuous {
        f64::INFINITY
    } else {
        profile.l_max / sigma_min
    };
    ErrorBound {
        l_max: profile.l_max,
        sigma_min,
        bound,
        vacuous,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaylorOrder {
    First,
    Second,
}

impl TaylorOrder {
    pub fn from_int(order: u8) -> Result<Self> {
        match order {
            1 => Ok(Self::First),
            2 => Ok(Self::Second),
            _ => Err(Error::InvalidArgument(format!(
                "taylor order must be 1 or 2, got {order}"
            ))),
        }
    }

    pub fn as_int(self) -> u8 {
        match self {
            Self::First => 1,
            Self::Second => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorEstimate {
    pub times: Vec<f64>,
    pub delta_z: Vec<Vec<f64>>,
    pub taylor_order: TaylorOrder,
    pub sigma_min: f64,
}

/// Explicit recursion
/// `δz_{n+1} = δz_n + Δt·[F_z·δz_n (+ ½·δz_nᵀ·F_zz·δz_n) − ℓ_n]`, `δz_0 = 0`,
/// with derivatives of `F` taken at `ẑ(t_n)`.
pub fn estimate_delta_z(profile: &ResidualProfile, system: &SystemDef, order: TaylorOrder) -> Result<ErrorEstimate> {
    let bound = error_bound(profile, system);
    let ceiling = if bound.bound.is_finite() {
        DIVERGENCE_FACTOR * bound.bound
    } else {
        f64::INFINITY
    };
    let mut est = estimate_delta_z_with_ceiling(profile, system, order, ceiling)?;
    est.sigma_min = bound.sigma_min;
    Ok(est)
}

pub fn estimate_delta_z_with_ceiling(
    profile: &ResidualProfile,
    system: &SystemDef,
    order: TaylorOrder,
    ceiling: f64,
) -> Result<ErrorEstimate> {
    if order == TaylorOrder::Second && !system.has_hessian() {
        return Err(Error::InvalidArgument(format!(
            "second-order estimate needs the Hessian tensor of `{}`",
            system.name()
        )));
    }
    let d = system.dim();
    let n = profile.times.len();
    let mut delta_z = Vec::with_capacity(n);
    let mut dz = vec![0.0; d];
    delta_z.push(dz.clone());
    let mut sigma_min = f64::INFINITY;
    for i in 0..n - 1 {
        let dt = profile.times[i + 1] - profile.times[i];
        let jac = system.jacobian(&profile.z_hat[i]);
        let mut rate: Vec<f64> = (0..d)
            .map(|r| (0..d).map(|c| jac[(r, c)] * dz[c]).sum::<f64>() - profile.residuals[i][r])
            .collect();
        if order == TaylorOrder::Second {
            let h = system.hessian(&profile.z_hat[i]).expect("checked above");
            for (r, q) in rate.iter_mut().zip(h.quadratic_form(&dz)) {
                *r += 0.5 * q;
            }
        }
        for (z, r) in dz.iter_mut().zip(&rate) {
            *z += dt * r;
        }
        let size = norm(&dz);
        if !(size <= ceiling) {
            return Err(Error::EstimatorDiverged {
                t: profile.times[i + 1],
                norm: size,
                ceiling,
            });
        }
        sigma_min = sigma_min.min(smallest_singular_value(&jac));
        delta_z.push(dz.clone());
    }
    Ok(ErrorEstimate {
        times: profile.times.clone(),
        delta_z,
        taylor_order: order,
        sigma_min,
    })
}

/// Error-corrected targets `z_ec = ẑ + δz` on a subsampled grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EcDataset {
    pub times: Vec<f64>,
    pub z_hat: Vec<Vec<f64>>,
    pub delta_z: Vec<Vec<f64>>,
    pub z_ec: Vec<Vec<f64>>,
    pub k: usize,
    pub source_iter: usize,
}

impl EcDataset {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// `count` evenly spaced indices into `0..len`, both ends included.
fn even_indices(len: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![0];
    }
    (0..count)
        .map(|j| ((j as f64) * (len - 1) as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

pub fn build_ec_dataset(
    params: &MlpParams,
    estimate: &ErrorEstimate,
    z0: &[f64],
    k: usize,
    n_base: usize,
    source_iter: usize,
) -> Result<EcDataset> {
    let count = k * n_base;
    let available = estimate.times.len();
    if count == 0 || count > available {
        return Err(Error::InvalidArgument(format!(
            "dataset of k·N = {count} points needs 1..={available} estimate grid points"
        )));
    }
    let idx = even_indices(available, count);
    let times: Vec<f64> = idx.iter().map(|&i| estimate.times[i]).collect();
    let z_hat: Vec<Vec<f64>> = times.iter().map(|&t| params.predict(t, z0)).collect();
    let delta_z: Vec<Vec<f64>> = idx.iter().map(|&i| estimate.delta_z[i].clone()).collect();
    let z_ec = z_hat
        .iter()
        .zip(&delta_z)
        .map(|(z, d)| z.iter().zip(d).map(|(a, b)| a + b).collect())
        .collect();
    Ok(EcDataset {
        times,
        z_hat,
        delta_z,
        z_ec,
        k,
        source_iter,
    })
}

/// First index, last index, and `n − 1` distinct interior indices, sorted.
pub fn sample_ec_batch(ec: &EcDataset, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = ec.len();
    if len <= 2 {
        return (0..len).collect();
    }
    let interior = len - 2;
    let take = n.saturating_sub(1).min(interior);
    let mut out: Vec<usize> = index::sample(rng, interior, take).into_iter().map(|i| i + 1).collect();
    out.sort_unstable();
    out.insert(0, 0);
    out.push(len - 1);
    out
}

/// `mean |ẑ(t_n) − z_ec(t_n)|²` over the batch and its gradient.
pub fn surrogate_loss_grad(params: &MlpParams, ec: &EcDataset, batch: &[usize], z0: &[f64]) -> Result<LossGrad> {
    if let Some(&bad) = batch.iter().find(|&&i| i >= ec.len()) {
        return Err(Error::InvalidArgument(format!(
            "batch index {bad} outside dataset of {} points",
            ec.len()
        )));
    }
    let times: Vec<f64> = batch.iter().map(|&i| ec.times[i]).collect();
    let targets: Vec<&[f64]> = batch.iter().map(|&i| ec.z_ec[i].as_slice()).collect();
    params.fit_loss_grad(&times, &targets, z0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSchedule {
    /// Residual loss at which error correction starts.
    pub tau_enter: f64,
    /// Surrogate loss at which supervised training ends.
    pub tau_refresh: f64,
    /// Residual iterations between supervised stretches.
    pub burst_iters: usize,
    /// Dataset resolution multiplier over the batch size.
    pub k: usize,
    pub max_cycles: usize,
    /// Cap on supervised iterations per cycle.
    pub phase_b_max_iters: usize,
    /// Estimator grid intervals over `[0, T]`.
    pub grid_intervals: usize,
    pub taylor_order: u8,
    /// Learning rate of the supervised phase; the training rate when unset.
    pub phase_b_lr: Option<f64>,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self {
            tau_enter: 1e-5,
            tau_refresh: 1e-9,
            burst_iters: 10,
            k: 10,
            max_cycles: 10,
            phase_b_max_iters: 200,
            grid_intervals: 4000,
            taylor_order: 2,
            phase_b_lr: None,
        }
    }
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_refresh < self.tau_enter) {
            return Err(Error::InvalidArgument(format!(
                "tau_refresh ({}) must be below tau_enter ({})",
                self.tau_refresh, self.tau_enter
            )));
        }
        if self.burst_iters == 0 || self.k == 0 || self.phase_b_max_iters == 0 || self.grid_intervals == 0 {
            return Err(Error::InvalidArgument(
                "burst_iters, k, phase_b_max_iters and grid_intervals must be at least 1".into(),
            ));
        }
        TaylorOrder::from_int(self.taylor_order)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub start_iter: usize,
    pub entry_loss: f64,
    pub bound: ErrorBound,
    pub max_delta_z: f64,
    pub refresh_f_evals: u64,
    pub refresh_wall_time: f64,
    pub phase_b_iters: usize,
    pub final_surrogate_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PhasedOutcome {
    pub params: MlpParams,
    pub history: Vec<TrainRecord>,
    pub snapshots: Vec<WeightSnapshot>,
    pub cycles: Vec<CycleReport>,
    pub stop: StopReason,
}

enum State {
    Residual,
    Supervised { ec: EcDataset, iters: usize },
    Burst { left: usize },
}

/// Residual training interleaved with supervised training on
/// self-generated error-corrected data:
///
/// 1. residual training until the loss reaches `tau_enter`;
/// 2. estimate `δz` on a fine grid and build `z_ec = ẑ + δz`;
/// 3. train against `z_ec` on random batches that keep both endpoints,
///    until the surrogate loss reaches `tau_refresh`;
/// 4. a short residual burst, then back to 1 while cycles remain.
///
/// With `max_cycles = 0` this is exactly [`crate::training::train_until`].
pub fn phased_train(
    params: MlpParams,
    schedule: &PhaseSchedule,
    config: &TrainConfig,
    z0: &[f64],
    system: &SystemDef,
) -> Result<PhasedOutcome> {
    phased_train_with(params, schedule, config, z0, system, None)
}

pub fn phased_train_with(
    mut params: MlpParams,
    schedule: &PhaseSchedule,
    config: &TrainConfig,
    z0: &[f64],
    system: &SystemDef,
    mut monitor: Option<&mut dyn Monitor>,
) -> Result<PhasedOutcome> {
    config.validate()?;
    schedule.validate()?;
    let order = TaylorOrder::from_int(schedule.taylor_order)?;
    let mut rng = batch_rng(config.seed);
    let mut ec_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut optimizer = Optimizer::new(config.optimizer, params.num_params());
    let supervised_config = match (config.optimizer, schedule.phase_b_lr) {
        (c, None) => c,
        (OptimizerConfig::Sgd { .. }, Some(lr)) => OptimizerConfig::Sgd { lr },
        (OptimizerConfig::Adam { beta1, beta2, eps, .. }, Some(lr)) => OptimizerConfig::Adam { lr, beta1, beta2, eps },
    };
    let mut supervised_optimizer = Optimizer::new(supervised_config, params.num_params());
    let mut history = Vec::new();
    let mut snapshots = vec![WeightSnapshot {
        iter: 0,
        weights: params.flatten(),
    }];
    let mut cycles: Vec<CycleReport> = Vec::new();
    let mut state = State::Residual;
    let mut stop = StopReason::MaxIters;

    for iter in 0..config.max_iters {
        if let Some(m) = monitor.as_deref_mut() {
            if m.should_stop(iter, &params) {
                stop = StopReason::Monitor;
                break;
            }
        }
        let mut reached_target = false;
        state = match state {
            State::Residual | State::Burst { .. } => {
                let batch = sample_batch(config, &mut rng);
                let mut record = train_step(&mut params, &batch, z0, system, &mut optimizer, iter)?;
                reached_target = record.loss <= config.loss_target;
                let next = match state {
                    State::Burst { left } => {
                        record.phase = Phase::Burst;
                        if left > 1 {
                            State::Burst { left: left - 1 }
                        } else {
                            State::Residual
                        }
                    }
                    _ if !reached_target && cycles.len() < schedule.max_cycles && record.loss <= schedule.tau_enter => {
                        let cycle = cycles.len();
                        let (ec, report) = refresh(&params, schedule, config, z0, system, order, iter + 1, record.loss)
                            .map_err(|e| Error::Cycle {
                                cycle,
                                source: Box::new(e),
                            })?;
                        cycles.push(CycleReport { cycle, ..report });
                        State::Supervised { ec, iters: 0 }
                    }
                    _ => State::Residual,
                };
                if let Some(m) = monitor.as_deref_mut() {
                    m.observe(&record);
                }
                history.push(record);
                next
            }
            State::Supervised { ec, iters } => {
                let started = Instant::now();
                let before = system.counts().f;
                let batch = sample_ec_batch(&ec, config.batch_size, &mut ec_rng);
                let lg = surrogate_loss_grad(&params, &ec, &batch, z0)?;
                if !lg.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { iter });
                }
                supervised_optimizer.apply(&mut params, &lg.grad)?;
                if !params.is_finite() {
                    return Err(Error::NonFiniteLoss { iter });
                }
                let record = TrainRecord {
                    iter,
                    phase: Phase::B,
                    loss: lg.loss,
                    loss_components: lg.components,
                    f_evals: system.counts().f - before,
                    wall_time: started.elapsed().as_secs_f64(),
                };
                if let Some(m) = monitor.as_deref_mut() {
                    m.observe(&record);
                }
                history.push(record);
                let iters = iters + 1;
                if lg.loss <= schedule.tau_refresh || iters >= schedule.phase_b_max_iters {
                    let report = cycles.last_mut().expect("supervised phase follows a refresh");
                    report.phase_b_iters = iters;
                    report.final_surrogate_loss = lg.loss;
                    State::Burst {
                        left: schedule.burst_iters,
                    }
                } else {
                    State::Supervised { ec, iters }
                }
            }
        };
        let applied = iter + 1;
        if applied % config.snapshot_every == 0 {
            snapshots.push(WeightSnapshot {
                iter: applied,
                weights: params.flatten(),
            });
        }
        if reached_target {
            stop = StopReason::LossTarget;
            break;
        }
    }
    if stop == StopReason::MaxIters {
        if let Some(m) = monitor {
            if m.should_stop(config.max_iters, &params) {
                stop = StopReason::Monitor;
            }
        }
    }
    Ok(PhasedOutcome {
        params,
        history,
        snapshots,
        cycles,
        stop,
    })
}

#[allow(clippy::too_many_arguments)]
fn refresh(
    params: &MlpParams,
    schedule: &PhaseSchedule,
    config: &TrainConfig,
    z0: &[f64],
    system: &SystemDef,
    order: TaylorOrder,
    source_iter: usize,
    entry_loss: f64,
) -> Result<(EcDataset, CycleReport)> {
    let started = Instant::now();
    let before = system.counts().f;
    let grid_step = config.horizon / schedule.grid_intervals as f64;
    let profile = residual_profile(params, z0, system, grid_step, config.horizon)?;
    let bound = error_bound(&profile, system);
    let estimate = estimate_delta_z(&profile, system, order)?;
    let ec = build_ec_dataset(params, &estimate, z0, schedule.k, config.batch_size, source_iter)?;
    let max_delta_z = estimate
        .delta_z
        .iter()
        .flat_map(|v| v.iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    let report = CycleReport {
        cycle: 0,
        start_iter: source_iter,
        entry_loss,
        bound,
        max_delta_z,
        refresh_f_evals: system.counts().f - before,
        refresh_wall_time: started.elapsed().as_secs_f64(),
        phase_b_iters: 0,
        final_surrogate_loss: f64::NAN,
    };
    Ok((ec, report))
}

/// Per-update wall time of the two training phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub residual_secs: f64,
    pub supervised_secs: f64,
    pub block: usize,
    pub repeats: usize,
}

impl PhaseCost {
    pub fn ratio(&self) -> f64 {
        self.supervised_secs / self.residual_secs
    }
}

/// Times full residual and supervised updates (gradient plus optimizer step)
/// from `params`, in alternating blocks, keeping the fastest block of each.
/// Both phases work on copies, so `params` is left untouched.
pub fn phase_cost(
    params: &MlpParams,
    config: &TrainConfig,
    schedule: &PhaseSchedule,
    z0: &[f64],
    system: &SystemDef,
    block: usize,
    repeats: usize,
) -> Result<PhaseCost> {
    if block == 0 || repeats == 0 {
        return Err(Error::InvalidArgument("block and repeats must be positive".into()));
    }
    config.validate()?;
    schedule.validate()?;
    let order = TaylorOrder::from_int(schedule.taylor_order)?;
    let grid_step = config.horizon / schedule.grid_intervals as f64;
    let profile = residual_profile(params, z0, system, grid_step, config.horizon)?;
    let estimate = estimate_delta_z(&profile, system, order)?;
    let ec = build_ec_dataset(params, &estimate, z0, schedule.k, config.batch_size, 0)?;

    let mut a = params.clone();
    let mut b = params.clone();
    let mut opt_a = Optimizer::new(config.optimizer, a.num_params());
    let mut opt_b = Optimizer::new(config.optimizer, b.num_params());
    let mut rng = batch_rng(config.seed);
    let mut ec_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (mut best_a, mut best_b) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..repeats {
        let started = Instant::now();
        for iter in 0..block {
            let batch = sample_batch(config, &mut rng);
            train_step(&mut a, &batch, z0, system, &mut opt_a, iter)?;
        }
        best_a = best_a.min(started.elapsed().as_secs_f64());

        let started = Instant::now();
        for _ in 0..block {
            let batch = sample_ec_batch(&ec, config.batch_size, &mut ec_rng);
            let lg = surrogate_loss_grad(&b, &ec, &batch, z0)?;
            opt_b.apply(&mut b, &lg.grad)?;
        }
        best_b = best_b.min(started.elapsed().as_secs_f64());
    }
    Ok(PhaseCost {
        residual_secs: best_a / block as f64,
        supervised_secs: best_b / block as f64,
        block,
        repeats,
    })
}
