//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use dynflow::error_correction::PhaseSchedule;
use dynflow::koopman::{GuardConfig, KoopmanSchedule, Observable, Rank};
use dynflow::systems::{catalog_get, SystemDef};
use dynflow::training::{OptimizerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: String,
    pub z0: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Phased error-corrected training when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<PhaseSchedule>,
    #[serde(default)]
    pub koopman: KoopmanSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub hidden: usize,
    pub seed: u64,
}

impl Default for NetSection {
    fn default() -> Self {
        Self { hidden: 32, seed: 1 }
    }
}

/// [`TrainConfig`] without the horizon, which comes from `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub max_iters: usize,
    pub loss_target: f64,
    pub snapshot_every: usize,
    pub seed: u64,
    /// Stop once `max_t |ẑ − z_rk4| ≤ target_error` on the output grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_error: Option<f64>,
    /// Iterations between accuracy checks.
    pub check_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            optimizer: d.optimizer,
            max_iters: d.max_iters,
            loss_target: d.loss_target,
            snapshot_every: d.snapshot_every,
            seed: d.seed,
            target_error: None,
            check_every: 100,
        }
    }
}

/// `rank = 4` or `rank = "auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RankSpec {
    Fixed(usize),
    Named(AutoRank),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoRank {
    Auto,
}

impl RankSpec {
    pub fn rank(self) -> Rank {
        match self {
            RankSpec::Fixed(r) => Rank::Fixed(r),
            RankSpec::Named(AutoRank::Auto) => Rank::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KoopmanSection {
    pub observable: Observable,
    pub rank: RankSpec,
    /// Snapshots per fit.
    pub window: usize,
    /// Training iterations between snapshots.
    pub stride: usize,
    /// Snapshot steps per Koopman proposal.
    pub p: usize,
    pub gamma: f64,
    pub validation_points: usize,
    /// Batch loss at which proposals start during benchmarking.
    pub start_loss: f64,
    pub max_proposals: usize,
}

impl Default for KoopmanSection {
    fn default() -> Self {
        let d = KoopmanSchedule::default();
        Self {
            observable: Observable::Weights,
            rank: match d.rank {
                Rank::Fixed(r) => RankSpec::Fixed(r),
                Rank::Auto => RankSpec::Named(AutoRank::Auto),
            },
            window: d.window,
            stride: d.stride,
            p: d.p,
            gamma: d.guard.gamma,
            validation_points: d.guard.validation_points,
            start_loss: d.start_loss,
            max_proposals: d.max_proposals,
        }
    }
}

impl KoopmanSection {
    pub fn guard(&self) -> GuardConfig {
        GuardConfig {
            gamma: self.gamma,
            validation_points: self.validation_points,
        }
    }

    pub fn schedule(&self) -> KoopmanSchedule {
        KoopmanSchedule {
            start_loss: self.start_loss,
            stride: self.stride,
            window: self.window,
            rank: self.rank.rank(),
            p: self.p,
            guard: self.guard(),
            max_proposals: self.max_proposals,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Upper bound on the residual-profile and estimator step.
    pub dt: f64,
    /// Points of the dense output grid on `[0, T]`.
    pub eval_points: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            eval_points: 1001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    /// Accuracy every leg must reach, as `max_t |ẑ − z_rk4|`.
    pub target_error: f64,
    pub check_every: usize,
    pub max_iters: usize,
    /// Network seeds; each leg runs once per seed.
    pub seeds: Vec<u64>,
    /// Timed runs per leg and seed; the fastest is reported.
    pub timing_repeats: usize,
    pub cost_block: usize,
    pub cost_repeats: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            target_error: 1e-3,
            check_every: 100,
            max_iters: 20_000,
            seeds: vec![1, 2, 3, 4, 5],
            timing_repeats: 3,
            cost_block: 200,
            cost_repeats: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Replaces the network and batch seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.net.seed = seed;
        self.train.seed = seed;
        self.benchmark.seeds = vec![seed];
        self
    }

    pub fn system_def(&self) -> Result<SystemDef, CliError> {
        catalog_get(&self.system).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            horizon: self.horizon,
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer,
            max_iters: self.train.max_iters,
            loss_target: self.train.loss_target,
            snapshot_every: self.train.snapshot_every,
            seed: self.train.seed,
        }
    }

    /// Estimator grid intervals: the smallest count with step at most `dt`.
    pub fn grid_intervals(&self) -> usize {
        (self.horizon / self.analysis.dt).ceil().max(1.0) as usize
    }

    pub fn eval_grid(&self) -> Vec<f64> {
        let n = self.analysis.eval_points - 1;
        (0..=n).map(|i| self.horizon * i as f64 / n as f64).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let system = self.system_def()?;
        if self.z0.len() != system.dim() {
            return bad(format!(
                "z0 has {} entries but {} has dimension {}",
                self.z0.len(),
                self.system,
                system.dim()
            ));
        }
        if self.z0.iter().any(|v| !v.is_finite()) {
            return bad("z0 must be finite".into());
        }
        if self.train.target_error.is_some_and(|e| !(e > 0.0)) || self.train.check_every == 0 {
            return bad("train.target_error and train.check_every must be positive".into());
        }
        if self.net.hidden == 0 {
            return bad("net.hidden must be positive".into());
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = &self.schedule {
            s.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.koopman
            .schedule()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.analysis.dt > 0.0) {
            return bad("analysis.dt must be positive".into());
        }
        if self.analysis.eval_points < 2 {
            return bad("analysis.eval_points must be at least 2".into());
        }
        let b = &self.benchmark;
        if !(b.target_error > 0.0)
            || b.check_every == 0
            || b.seeds.is_empty()
            || b.timing_repeats == 0
            || b.cost_block == 0
            || b.cost_repeats == 0
        {
            return bad("benchmark needs a positive target, check interval, timing repeats, cost block/repeats and at least one seed".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
