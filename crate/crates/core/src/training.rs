//! Unsupervised residual training over random collocation batches.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LossGrad, MlpParams};
use crate::systems::{ReferenceTrajectory, SystemDef};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr } | Self::Adam { lr, .. } => lr,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Time horizon `T`.
    pub horizon: f64,
    /// `N`: a batch holds `N + 1` times, both endpoints included.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub max_iters: usize,
    pub loss_target: f64,
    pub snapshot_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: std::f64::consts::PI,
            batch_size: 100,
            optimizer: OptimizerConfig::default(),
            max_iters: 20_000,
            loss_target: 1e-8,
            snapshot_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        let lr = self.optimizer.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid learning rate {lr}")));
        }
        if self.snapshot_every == 0 {
            return Err(Error::InvalidArgument("snapshot_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradient-based update rule over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    /// Clears moment estimates.
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.step = 0;
    }

    pub fn apply(&mut self, params: &mut MlpParams, grad: &MlpParams) -> Result<()> {
        let mut w = params.flatten();
        let g = grad.flatten();
        self.update(&mut w, &g);
        params.assign_flat(&w)
    }

    pub fn update(&mut self, w: &mut [f64], g: &[f64]) {
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                if lr == 0.0 {
                    return;
                }
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= lr * gi;
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                self.step += 1;
                if lr == 0.0 {
                    return;
                }
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for i in 0..w.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Phase {
    /// Residual training.
    #[default]
    A,
    /// Supervised training against an error-corrected dataset.
    B,
    /// Short residual burst between cycles.
    Burst,
    /// Koopman proposal evaluation.
    Koopman,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::A => "A",
            Phase::B => "B",
            Phase::Burst => "burst",
            Phase::Koopman => "koopman",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub phase: Phase,
    /// Loss at the weights before this iteration's update.
    pub loss: f64,
    /// Per-output-dimension parts; they sum to `loss`.
    pub loss_components: Vec<f64>,
    /// `F` evaluations spent in this iteration.
    pub f_evals: u64,
    pub wall_time: f64,
}

/// Flattened weights after `iter` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSnapshot {
    pub iter: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LossTarget,
    MaxIters,
    Monitor,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub history: Vec<TrainRecord>,
    pub snapshots: Vec<WeightSnapshot>,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn converged(&self) -> bool {
        self.stop != StopReason::MaxIters
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.loss)
    }
}

/// Periodic stop check run during training.
pub trait Monitor {
    /// Called with the number of updates applied so far.
    fn should_stop(&mut self, iter: usize, params: &MlpParams) -> bool;

    /// Sees every history record as it is produced, including those of a
    /// run that later aborts.
    fn observe(&mut self, _record: &TrainRecord) {}
}

/// Stops once `max_t |ẑ(t) − z_ref(t)|` drops to `threshold`.
#[derive(Debug, Clone)]
pub struct AccuracyMonitor {
    pub reference: ReferenceTrajectory,
    pub z0: Vec<f64>,
    pub threshold: f64,
    pub every: usize,
    pub last_error: f64,
}

impl AccuracyMonitor {
    pub fn new(reference: ReferenceTrajectory, z0: Vec<f64>, threshold: f64, every: usize) -> Self {
        Self {
            reference,
            z0,
            threshold,
            every: every.max(1),
            last_error: f64::INFINITY,
        }
    }

    pub fn error(&self, params: &MlpParams) -> f64 {
        max_abs_error(params, &self.z0, &self.reference)
    }
}

impl Monitor for AccuracyMonitor {
    fn should_stop(&mut self, iter: usize, params: &MlpParams) -> bool {
        if iter % self.every != 0 {
            return false;
        }
        self.last_error = self.error(params);
        self.last_error <= self.threshold
    }
}

/// Largest absolute componentwise difference between `ẑ` and a reference.
pub fn max_abs_error(params: &MlpParams, z0: &[f64], reference: &ReferenceTrajectory) -> f64 {
    reference
        .times
        .iter()
        .zip(&reference.states)
        .map(|(&t, z)| {
            params
                .predict(t, z0)
                .iter()
                .zip(z)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// `{0, t_1, …, t_{N−1}, T}` with interior points uniform on `(0, T)`, sorted.
pub fn sample_batch(config: &TrainConfig, rng: &mut impl Rng) -> Vec<f64> {
    let t_end = config.horizon;
    let mut batch = Vec::with_capacity(config.batch_size + 1);
    batch.push(0.0);
    for _ in 0..config.batch_size.saturating_sub(1) {
        let t = loop {
            let u: f64 = rng.random_range(0.0..t_end);
            if u > 0.0 {
                break u;
            }
        };
        batch.push(t);
    }
    batch.sort_by(f64::total_cmp);
    batch.push(t_end);
    batch
}

pub fn batch_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn record_from(iter: usize, phase: Phase, lg: &LossGrad, f_evals: u64, started: Instant) -> TrainRecord {
    TrainRecord {
        iter,
        phase,
        loss: lg.loss,
        loss_components: lg.components.clone(),
        f_evals,
        wall_time: started.elapsed().as_secs_f64(),
    }
}

/// One residual-loss update.
pub fn train_step(
    params: &mut MlpParams,
    batch: &[f64],
    z0: &[f64],
    system: &SystemDef,
    optimizer: &mut Optimizer,
    iter: usize,
) -> Result<TrainRecord> {
    let started = Instant::now();
    let before = system.counts().f;
    let lg = params.residual_loss_grad(batch, z0, system)?;
    if !lg.loss.is_finite() {
        return Err(Error::NonFiniteLoss { iter });
    }
    optimizer.apply(params, &lg.grad)?;
    if !params.is_finite() {
        return Err(Error::NonFiniteLoss { iter });
    }
    let f_evals = system.counts().f - before;
    Ok(record_from(iter, Phase::A, &lg, f_evals, started))
}

/// Runs [`train_step`] until the loss target or the iteration budget.
pub fn train_until(params: MlpParams, config: &TrainConfig, z0: &[f64], system: &SystemDef) -> Result<TrainOutcome> {
    train_until_with(params, config, z0, system, None)
}

pub fn train_until_with(
    mut params: MlpParams,
    config: &TrainConfig,
    z0: &[f64],
    system: &SystemDef,
    mut monitor: Option<&mut dyn Monitor>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = batch_rng(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, params.num_params());
    let mut history = Vec::new();
    let mut snapshots = vec![WeightSnapshot {
        iter: 0,
        weights: params.flatten(),
    }];
    let mut stop = StopReason::MaxIters;

    for iter in 0..config.max_iters {
        if let Some(m) = monitor.as_deref_mut() {
            if m.should_stop(iter, &params) {
                stop = StopReason::Monitor;
                break;
            }
        }
        let batch = sample_batch(config, &mut rng);
        let record = train_step(&mut params, &batch, z0, system, &mut optimizer, iter)?;
        let done = record.loss <= config.loss_target;
        if let Some(m) = monitor.as_deref_mut() {
            m.observe(&record);
        }
        history.push(record);
        let applied = iter + 1;
        if applied % config.snapshot_every == 0 {
            snapshots.push(WeightSnapshot {
                iter: applied,
                weights: params.flatten(),
            });
        }
        if done {
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
    Ok(TrainOutcome {
        params,
        history,
        snapshots,
        stop,
    })
}
