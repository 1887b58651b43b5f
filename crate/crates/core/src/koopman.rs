//! Finite-rank Koopman models of training flows.
//!
//! Snapshots of an observable (flattened weights, loss components, or the
//! scalar loss) taken every `stride` iterations are treated as a discrete
//! dynamical system and fitted with exact DMD. The fit is affine: columns are
//! centered before the SVD and the model is anchored at its own fixed point,
//! so a flow `x -> A x` is recovered exactly even though its iterates do not
//! have zero mean.

use std::fmt;
use std::time::Instant;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::MlpParams;
use crate::systems::SystemDef;
use crate::training::{
    batch_rng, sample_batch, train_step, Monitor, Optimizer, Phase, StopReason, TrainConfig, TrainRecord,
    WeightSnapshot,
};

type C64 = Complex<f64>;

/// Tolerance for treating an eigenvalue as `μ = 1`.
pub const DEFAULT_UNIT_EPS: f64 = 1e-6;
/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Weights,
    LossComponents,
    Loss,
    Custom,
}

impl Observable {
    pub fn as_str(self) -> &'static str {
        match self {
            Observable::Weights => "weights",
            Observable::LossComponents => "loss_components",
            Observable::Loss => "loss",
            Observable::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weights" => Ok(Observable::Weights),
            "loss_components" => Ok(Observable::LossComponents),
            "loss" => Ok(Observable::Loss),
            "custom" => Ok(Observable::Custom),
            _ => Err(Error::InvalidArgument(format!(
                "unknown observable `{s}`; expected weights, loss_components, loss or custom"
            ))),
        }
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One column per recorded iteration; column `j` belongs to iteration
/// `first_iter + j * stride`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    pub observable: Observable,
    pub columns: Vec<Vec<f64>>,
    pub stride: usize,
    pub first_iter: usize,
    pub source_run: String,
}

impl SnapshotMatrix {
    pub fn new(
        observable: Observable,
        columns: Vec<Vec<f64>>,
        stride: usize,
        first_iter: usize,
        source_run: impl Into<String>,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("snapshot stride must be positive".into()));
        }
        if columns.len() < 3 {
            return Err(Error::InsufficientSnapshots {
                required: 3,
                available: columns.len(),
            });
        }
        let rows = columns[0].len();
        if rows == 0 {
            return Err(Error::InvalidArgument("snapshots have no rows".into()));
        }
        for (index, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(Error::RaggedSnapshots {
                    index,
                    expected: rows,
                    got: c.len(),
                });
            }
        }
        Ok(Self {
            observable,
            columns,
            stride,
            first_iter,
            source_run: source_run.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.columns[0].len()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn iters(&self) -> Vec<usize> {
        (0..self.len()).map(|j| self.first_iter + j * self.stride).collect()
    }

    /// Columns `start..end` as a new matrix with the iteration labels kept.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "column range {start}..{end} outside 0..{}",
                self.len()
            )));
        }
        Self::new(
            self.observable,
            self.columns[start..end].to_vec(),
            self.stride,
            self.first_iter + start * self.stride,
            self.source_run.clone(),
        )
    }

    /// Sum over rows of each column, as a one-row matrix.
    pub fn summed(&self) -> Self {
        Self {
            observable: Observable::Custom,
            columns: self.columns.iter().map(|c| vec![c.iter().sum()]).collect(),
            ..self.clone()
        }
    }

    /// Row `i` alone, as a one-row matrix.
    pub fn row(&self, i: usize) -> Self {
        Self {
            observable: Observable::Custom,
            columns: self.columns.iter().map(|c| vec![c[i]]).collect(),
            ..self.clone()
        }
    }

    pub fn header(&self) -> String {
        format!(
            "# observable={} stride={} source_run={}",
            self.observable, self.stride, self.source_run
        )
    }

    /// CSV with one column per iteration: the header line, an `iter` row of
    /// iteration numbers, then one row per observable component.
    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        out.push_str("row");
        for it in self.iters() {
            out.push_str(&format!(",{it}"));
        }
        out.push('\n');
        for i in 0..self.rows() {
            out.push_str(&format!("x_{}", i + 1));
            for c in &self.columns {
                out.push_str(&format!(",{}", c[i]));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(format!("snapshot csv: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let fields = header
            .strip_prefix('#')
            .ok_or_else(|| bad("missing `#` header line".into()))?;
        let (mut observable, mut stride, mut source_run) = (None, None, String::new());
        for kv in fields.split_whitespace() {
            match kv.split_once('=') {
                Some(("observable", v)) => observable = Some(Observable::parse(v)?),
                Some(("stride", v)) => stride = Some(v.parse::<usize>().map_err(|e| bad(format!("stride: {e}")))?),
                Some(("source_run", v)) => source_run = v.to_string(),
                _ => return Err(bad(format!("unexpected header field `{kv}`"))),
            }
        }
        let observable = observable.ok_or_else(|| bad("header lacks observable".into()))?;
        let stride = stride.ok_or_else(|| bad("header lacks stride".into()))?;

        let iter_line = lines.next().ok_or_else(|| bad("missing iteration row".into()))?;
        let iters = iter_line
            .split(',')
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| bad(format!("iteration `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let first_iter = *iters.first().ok_or_else(|| bad("no columns".into()))?;
        if iters.iter().enumerate().any(|(j, &it)| it != first_iter + j * stride) {
            return Err(bad("iterations are not uniformly strided".into()));
        }

        let mut columns = vec![Vec::new(); iters.len()];
        for line in lines {
            let values = line
                .split(',')
                .skip(1)
                .map(|s| s.trim().parse::<f64>().map_err(|e| bad(format!("value `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != iters.len() {
                return Err(bad(format!(
                    "row has {} values, expected {}",
                    values.len(),
                    iters.len()
                )));
            }
            for (c, v) in columns.iter_mut().zip(values) {
                c.push(v);
            }
        }
        Self::new(observable, columns, stride, first_iter, source_run)
    }
}

/// Flattened-weight snapshots; the stride is read off the iteration labels.
pub fn record_weights(snapshots: &[WeightSnapshot], source_run: &str) -> Result<SnapshotMatrix> {
    if snapshots.len() < 3 {
        return Err(Error::InsufficientSnapshots {
            required: 3,
            available: snapshots.len(),
        });
    }
    let first = snapshots[0].iter;
    let stride = snapshots[1].iter.saturating_sub(first);
    if stride == 0 || snapshots.iter().enumerate().any(|(j, s)| s.iter != first + j * stride) {
        return Err(Error::InvalidArgument(
            "weight snapshots are not uniformly strided".into(),
        ));
    }
    let columns = snapshots.iter().map(|s| s.weights.clone()).collect();
    SnapshotMatrix::new(Observable::Weights, columns, stride, first, source_run)
}

/// Loss or loss-component snapshots from every record whose iteration is a
/// multiple of `stride`.
pub fn record_losses(
    history: &[TrainRecord],
    observable: Observable,
    stride: usize,
    source_run: &str,
) -> Result<SnapshotMatrix> {
    if stride == 0 {
        return Err(Error::InvalidArgument("snapshot stride must be positive".into()));
    }
    let picked: Vec<&TrainRecord> = history.iter().filter(|r| r.iter % stride == 0).collect();
    let columns = match observable {
        Observable::Loss => picked.iter().map(|r| vec![r.loss]).collect(),
        Observable::LossComponents => picked.iter().map(|r| r.loss_components.clone()).collect(),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "training history cannot supply the `{observable}` observable"
            )))
        }
    };
    let first = picked.first().map_or(0, |r| r.iter);
    if picked.iter().enumerate().any(|(j, r)| r.iter != first + j * stride) {
        return Err(Error::InvalidArgument(
            "history has gaps at the requested stride".into(),
        ));
    }
    SnapshotMatrix::new(observable, columns, stride, first, source_run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub struct KoopmanModel {
    pub rank: usize,
    /// Discrete-time eigenvalues `μ_i`, sorted by decreasing magnitude.
    pub eigenvalues: Vec<C64>,
    /// Mode `i` is column `i`.
    pub modes: DMatrix<C64>,
    /// Coordinates of the first window column relative to `offset`.
    pub amplitudes: Vec<C64>,
    /// Affine fixed point the modes are expanded around.
    pub offset: Vec<f64>,
    /// Largest relative one-step error over the window.
    pub residual: f64,
    pub stride: usize,
    /// Iteration of the first window column, where `t = 0`.
    pub origin_iter: usize,
    pub warnings: Vec<String>,
}

fn real_to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|x| C64::new(x, 0.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Eigenpairs of a real square matrix via complex Schur form and triangular
/// back-substitution. Conjugate pairs are made exact afterwards.
fn eigen(a: &DMatrix<f64>) -> (Vec<C64>, DMatrix<C64>) {
    let n = a.nrows();
    let (q, t) = real_to_complex(a).schur().unpack();
    let scale = t.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let tiny = scale * f64::EPSILON;
    let mut values = Vec::with_capacity(n);
    let mut vectors = DMatrix::<C64>::zeros(n, n);
    for k in 0..n {
        let lambda = t[(k, k)];
        let mut y = DVector::<C64>::zeros(n);
        y[k] = C64::new(1.0, 0.0);
        for j in (0..k).rev() {
            let mut s = C64::new(0.0, 0.0);
            for l in j + 1..=k {
                s += t[(j, l)] * y[l];
            }
            let mut d = t[(j, j)] - lambda;
            if d.norm() < tiny {
                d = C64::new(tiny, 0.0);
            }
            y[j] = -s / d;
        }
        let v = &q * y;
        let v = &v / C64::new(v.norm(), 0.0);
        vectors.set_column(k, &v);
        values.push(lambda);
    }
    pair_conjugates(&mut values, &mut vectors);
    (values, vectors)
}

fn pair_conjugates(values: &mut [C64], vectors: &mut DMatrix<C64>) {
    let n = values.len();
    let scale = values.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let real_tol = 1e-13 * scale;
    let mut done = vec![false; n];
    for i in 0..n {
        if done[i] {
            continue;
        }
        done[i] = true;
        if values[i].im.abs() <= real_tol {
            values[i].im = 0.0;
            // Rotate so the largest entry is real, then drop the imaginary part.
            let col = vectors.column(i).clone_owned();
            let pivot = col
                .iter()
                .copied()
                .max_by(|a, b| a.norm().total_cmp(&b.norm()))
                .unwrap_or(C64::new(1.0, 0.0));
            let phase = if pivot.norm() > 0.0 {
                pivot.conj() / pivot.norm()
            } else {
                C64::new(1.0, 0.0)
            };
            let real = col.map(|z| C64::new((z * phase).re, 0.0));
            let nrm = real.norm();
            vectors.set_column(i, &(real / C64::new(nrm.max(f64::MIN_POSITIVE), 0.0)));
            continue;
        }
        let target = values[i].conj();
        let partner = (0..n)
            .filter(|&j| !done[j])
            .min_by(|&a, &b| (values[a] - target).norm().total_cmp(&(values[b] - target).norm()));
        if let Some(j) = partner {
            done[j] = true;
            let mean = (values[i] + values[j].conj()) * 0.5;
            let (upper, lower) = if mean.im >= 0.0 {
                (mean, mean.conj())
            } else {
                (mean.conj(), mean)
            };
            let vi = vectors.column(i).clone_owned();
            let v_upper = if values[i].im >= 0.0 { vi } else { vi.map(|z| z.conj()) };
            values[i] = upper;
            values[j] = lower;
            vectors.set_column(i, &v_upper);
            vectors.set_column(j, &v_upper.map(|z| z.conj()));
        }
    }
}

fn lstsq(a: &DMatrix<C64>, b: &DVector<C64>) -> DVector<C64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    svd.solve(b, smax * RANK_TOL).expect("U and V were computed")
}

/// Fits a model to the last `window` columns (all columns when `None`).
pub fn fit(snapshots: &SnapshotMatrix, rank: Rank, window: Option<usize>) -> Result<KoopmanModel> {
    let total = snapshots.len();
    let w = window.unwrap_or(total);
    if w > total {
        return Err(Error::InsufficientSnapshots {
            required: w,
            available: total,
        });
    }
    let needed = match rank {
        Rank::Fixed(r) => (r + 1).max(3),
        Rank::Auto => 3,
    };
    if w < needed {
        return Err(Error::InsufficientSnapshots {
            required: needed,
            available: w,
        });
    }
    if rank == Rank::Fixed(0) {
        return Err(Error::InvalidArgument("rank must be positive".into()));
    }
    let cols = &snapshots.columns[total - w..];
    let m = snapshots.rows();
    let pairs = w - 1;
    let x = DMatrix::from_fn(m, pairs, |i, j| cols[j][i]);
    let y = DMatrix::from_fn(m, pairs, |i, j| cols[j + 1][i]);
    let x_mean = x.column_mean();
    let y_mean = y.column_mean();
    let mut xc = x.clone();
    let mut yc = y.clone();
    for j in 0..pairs {
        xc.column_mut(j).axpy(-1.0, &x_mean, 1.0);
        yc.column_mut(j).axpy(-1.0, &y_mean, 1.0);
    }
    let origin_iter = snapshots.first_iter + (total - w) * snapshots.stride;

    let svd = xc.svd(true, true);
    let s = &svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let numerical = s.iter().filter(|&&v| v > smax * RANK_TOL && v > 0.0).count();
    let mut warnings = Vec::new();
    if numerical == 0 {
        return Ok(constant_model(cols, snapshots.stride, origin_iter));
    }
    let r = match rank {
        Rank::Auto => numerical,
        Rank::Fixed(r) if r > numerical => {
            warnings.push(format!(
                "requested rank {r} exceeds numerical rank {numerical}; using {numerical}"
            ));
            numerical
        }
        Rank::Fixed(r) => r,
    };
    let u = svd.u.as_ref().expect("computed").columns(0, r).clone_owned();
    let v_t = svd.v_t.as_ref().expect("computed").rows(0, r).clone_owned();
    let s_inv = DMatrix::from_diagonal(&DVector::from_iterator(r, s.iter().take(r).map(|v| 1.0 / v)));
    let a_tilde = u.transpose() * &yc * v_t.transpose() * s_inv;

    // Fixed point of the affine map x -> x̄ + ... restricted to span(U).
    let i_minus_a = DMatrix::<f64>::identity(r, r) - &a_tilde;
    let rhs = u.transpose() * (&y_mean - &x_mean);
    let fp_svd = i_minus_a.svd(true, true);
    let fp_max = fp_svd.singular_values.iter().copied().fold(0.0, f64::max);
    let a_star = fp_svd.solve(&rhs, fp_max * RANK_TOL).expect("computed");
    let offset = &x_mean + &u * a_star;

    let (mut eigenvalues, w_vecs) = eigen(&a_tilde);
    let mut modes = real_to_complex(&u) * w_vecs;
    let x0: DVector<C64> =
        DVector::from_iterator(m, cols[0].iter().zip(offset.iter()).map(|(a, b)| C64::new(a - b, 0.0)));
    let mut amplitudes: Vec<C64> = lstsq(&modes, &x0).iter().copied().collect();

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        eigenvalues[b]
            .norm()
            .total_cmp(&eigenvalues[a].norm())
            .then(eigenvalues[b].im.total_cmp(&eigenvalues[a].im))
    });
    eigenvalues = order.iter().map(|&i| eigenvalues[i]).collect();
    amplitudes = order.iter().map(|&i| amplitudes[i]).collect();
    modes = DMatrix::from_fn(m, r, |i, j| modes[(i, order[j])]);

    let mut model = KoopmanModel {
        rank: r,
        eigenvalues,
        modes,
        amplitudes,
        offset: offset.iter().copied().collect(),
        residual: 0.0,
        stride: snapshots.stride,
        origin_iter,
        warnings,
    };
    model.residual = (0..pairs)
        .map(|j| {
            let next = model.step_from(&cols[j], 1);
            let diff: Vec<f64> = next.iter().zip(&cols[j + 1]).map(|(a, b)| a - b).collect();
            let den = norm(&cols[j + 1]);
            if den > 0.0 {
                norm(&diff) / den
            } else {
                norm(&diff)
            }
        })
        .fold(0.0, f64::max);
    Ok(model)
}

fn constant_model(cols: &[Vec<f64>], stride: usize, origin_iter: usize) -> KoopmanModel {
    let x0 = &cols[0];
    let m = x0.len();
    let amp = norm(x0);
    let mode = if amp > 0.0 {
        DMatrix::from_fn(m, 1, |i, _| C64::new(x0[i] / amp, 0.0))
    } else {
        DMatrix::from_fn(m, 1, |i, _| C64::new(if i == 0 { 1.0 } else { 0.0 }, 0.0))
    };
    KoopmanModel {
        rank: 1,
        eigenvalues: vec![C64::new(1.0, 0.0)],
        modes: mode,
        amplitudes: vec![C64::new(amp, 0.0)],
        offset: vec![0.0; m],
        residual: 0.0,
        stride,
        origin_iter,
        warnings: vec!["snapshots are constant; fitted a single unit mode".into()],
    }
}

/// Real part and the largest imaginary residue of a modal sum.
fn modal_sum(model: &KoopmanModel, coeffs: &[C64], base: &[f64]) -> (Vec<f64>, f64) {
    let m = base.len();
    let mut out = vec![C64::new(0.0, 0.0); m];
    for (j, &c) in coeffs.iter().enumerate() {
        for (i, o) in out.iter_mut().enumerate() {
            *o += model.modes[(i, j)] * c;
        }
    }
    let imag = out.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    (out.iter().zip(base).map(|(z, b)| b + z.re).collect(), imag)
}

fn powu(mu: C64, t: usize) -> C64 {
    match u32::try_from(t) {
        Ok(e) => mu.powu(e),
        Err(_) => mu.powf(t as f64),
    }
}

impl KoopmanModel {
    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    /// Continuous-time exponents `λ_i = ln μ_i` (principal branch).
    pub fn log_eigenvalues(&self) -> Vec<C64> {
        self.eigenvalues.iter().map(|mu| mu.ln()).collect()
    }

    /// Predicted observable `t` snapshot steps after the window origin, with
    /// the imaginary residue of the modal sum.
    pub fn propagate_with_residue(&self, t: usize) -> (Vec<f64>, f64) {
        let coeffs: Vec<C64> = self
            .amplitudes
            .iter()
            .zip(&self.eigenvalues)
            .map(|(b, &mu)| b * powu(mu, t))
            .collect();
        modal_sum(self, &coeffs, &self.offset)
    }

    pub fn propagate(&self, t: usize) -> Vec<f64> {
        self.propagate_with_residue(t).0
    }

    /// Modal coordinates of `x` relative to the offset.
    pub fn lift(&self, x: &[f64]) -> Vec<C64> {
        let rhs = DVector::from_iterator(x.len(), x.iter().zip(&self.offset).map(|(a, b)| C64::new(a - b, 0.0)));
        lstsq(&self.modes, &rhs).iter().copied().collect()
    }

    /// Advances `x` by `p` snapshot steps. Components of `x` outside the span
    /// of the modes are carried over unchanged.
    pub fn step_from(&self, x: &[f64], p: usize) -> Vec<f64> {
        if p == 0 {
            return x.to_vec();
        }
        let coeffs: Vec<C64> = self
            .lift(x)
            .iter()
            .zip(&self.eigenvalues)
            .map(|(b, &mu)| b * (powu(mu, p) - C64::new(1.0, 0.0)))
            .collect();
        modal_sum(self, &coeffs, x).0
    }

    pub fn limit_point(&self) -> LimitPoint {
        self.limit_point_with(DEFAULT_UNIT_EPS)
    }

    pub fn limit_point_with(&self, unit_eps: f64) -> LimitPoint {
        let one = C64::new(1.0, 0.0);
        let unit: Vec<usize> = (0..self.rank)
            .filter(|&i| (self.eigenvalues[i] - one).norm() <= unit_eps)
            .collect();
        let persistent: Vec<C64> = self
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(i, mu)| !unit.contains(i) && mu.norm() >= 1.0)
            .map(|(_, &mu)| mu)
            .collect();
        let near_unit_circle = self
            .eigenvalues
            .iter()
            .filter(|mu| (mu.norm() - 1.0).abs() <= unit_eps)
            .count();
        let coeffs: Vec<C64> = (0..self.rank)
            .map(|i| {
                if unit.contains(&i) {
                    self.amplitudes[i]
                } else {
                    C64::new(0.0, 0.0)
                }
            })
            .collect();
        let limit = modal_sum(self, &coeffs, &self.offset).0;
        let slowest_decay = self
            .eigenvalues
            .iter()
            .map(|mu| mu.norm())
            .filter(|&r| r < 1.0)
            .fold(0.0, f64::max);
        LimitPoint {
            converges: persistent.is_empty(),
            limit,
            unit_modes: unit.len(),
            persistent,
            slowest_decay,
            ambiguous: near_unit_circle > 1,
        }
    }

    pub fn spectrum_report(&self) -> SpectrumReport {
        let lp = self.limit_point();
        SpectrumReport {
            rank: self.rank,
            eigenvalues: self
                .eigenvalues
                .iter()
                .map(|mu| EigenvalueEntry {
                    re: mu.re,
                    im: mu.im,
                    magnitude: mu.norm(),
                })
                .collect(),
            residual: self.residual,
            converges: lp.converges,
            limit_norm: norm(&lp.limit),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitPoint {
    /// Every eigenvalue is inside the unit circle or equal to one.
    pub converges: bool,
    pub limit: Vec<f64>,
    pub unit_modes: usize,
    /// Eigenvalues on or outside the unit circle other than `μ = 1`.
    pub persistent: Vec<C64>,
    /// Largest magnitude among decaying eigenvalues.
    pub slowest_decay: f64,
    /// More than one eigenvalue within the unit tolerance of the unit circle.
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenvalueEntry {
    pub re: f64,
    pub im: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub rank: usize,
    pub eigenvalues: Vec<EigenvalueEntry>,
    pub residual: f64,
    pub converges: bool,
    pub limit_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardConfig {
    /// Accepted loss increase factor over the pre-step loss.
    pub gamma: f64,
    /// Evenly spaced validation times on `[0, T]`.
    pub validation_points: usize,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            validation_points: 101,
        }
    }
}

impl GuardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        if self.validation_points < 2 {
            return Err(Error::InvalidArgument("validation needs at least 2 points".into()));
        }
        Ok(())
    }

    pub fn validation_times(&self, horizon: f64) -> Vec<f64> {
        let n = self.validation_points - 1;
        (0..=n).map(|i| horizon * i as f64 / n as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanStepReport {
    pub p: usize,
    /// Training iterations the proposal stands in for.
    pub iterations_equivalent: usize,
    pub accepted: bool,
    pub loss_before: f64,
    pub loss_after: f64,
    pub f_evals: u64,
    pub step_wall_secs: f64,
    /// One residual gradient evaluation on the validation set, for scale.
    pub standard_iter_wall_secs: f64,
}

/// Guarded Koopman update on a flat weight vector.
///
/// `loss` is evaluated at the current and at the proposed weights. The
/// proposal is kept if its loss is at most `(1 + gamma)` times the current
/// loss; otherwise `weights` is restored bit for bit.
pub fn koopman_train_flat<L>(
    weights: &mut Vec<f64>,
    model: &KoopmanModel,
    p: usize,
    gamma: f64,
    mut loss: L,
) -> Result<(bool, f64, f64)>
where
    L: FnMut(&[f64]) -> Result<f64>,
{
    if weights.len() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: weights.len(),
            context: "koopman_train weights",
        });
    }
    let before = loss(weights)?;
    if p == 0 {
        return Ok((true, before, before));
    }
    let proposal = model.step_from(weights, p);
    let after = if proposal.iter().all(|x| x.is_finite()) {
        loss(&proposal)?
    } else {
        f64::INFINITY
    };
    let accepted = after.is_finite() && after <= (1.0 + gamma) * before;
    if accepted {
        *weights = proposal;
    }
    Ok((accepted, before, after))
}

/// Guarded Koopman update of a network, judged by the residual loss on the
/// guard's validation grid.
pub fn koopman_train(
    params: &mut MlpParams,
    model: &KoopmanModel,
    p: usize,
    guard: &GuardConfig,
    z0: &[f64],
    horizon: f64,
    system: &SystemDef,
) -> Result<KoopmanStepReport> {
    guard.validate()?;
    let times = guard.validation_times(horizon);
    let started = Instant::now();
    let before_evals = system.counts().f;
    let template = params.clone();
    let mut weights = params.flatten();
    let (accepted, loss_before, loss_after) = koopman_train_flat(&mut weights, model, p, guard.gamma, |w| {
        let candidate = MlpParams::from_flat(&template, w)?;
        Ok(candidate.residual_loss(&times, z0, system)?.0)
    })?;
    if accepted && p > 0 {
        *params = MlpParams::from_flat(&template, &weights)?;
    }
    let step_wall_secs = started.elapsed().as_secs_f64();
    let f_evals = system.counts().f - before_evals;

    let started = Instant::now();
    std::hint::black_box(template.residual_loss_grad(&times, z0, system)?);
    let standard_iter_wall_secs = started.elapsed().as_secs_f64();
    Ok(KoopmanStepReport {
        p,
        iterations_equivalent: p * model.stride,
        accepted,
        loss_before,
        loss_after,
        f_evals,
        step_wall_secs,
        standard_iter_wall_secs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub components: usize,
    pub steps: usize,
    /// `|sum model − Σ component models|` per step.
    pub discrepancy: Vec<f64>,
    pub max_discrepancy: f64,
    /// Sum-model residual plus all component residuals.
    pub residual_sum: f64,
    /// Largest discrepancy relative to the summed prediction.
    pub max_relative_discrepancy: f64,
}

/// Compares a model of the summed loss with the sum of per-component models,
/// over `t = 0..window`.
pub fn linearity_check(components: &SnapshotMatrix, rank: Rank, window: Option<usize>) -> Result<LinearityReport> {
    let sum_model = fit(&components.summed(), rank, window)?;
    let parts = (0..components.rows())
        .map(|i| fit(&components.row(i), rank, window))
        .collect::<Result<Vec<_>>>()?;
    let steps = window.unwrap_or(components.len());
    let mut discrepancy = Vec::with_capacity(steps);
    let mut max_rel = 0.0f64;
    for t in 0..steps {
        let whole = sum_model.propagate(t)[0];
        let split: f64 = parts.iter().map(|m| m.propagate(t)[0]).sum();
        let d = (whole - split).abs();
        if whole.abs() > 0.0 {
            max_rel = max_rel.max(d / whole.abs());
        }
        discrepancy.push(d);
    }
    Ok(LinearityReport {
        components: components.rows(),
        steps,
        max_discrepancy: discrepancy.iter().copied().fold(0.0, f64::max),
        discrepancy,
        residual_sum: sum_model.residual + parts.iter().map(|m| m.residual).sum::<f64>(),
        max_relative_discrepancy: max_rel,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KoopmanSchedule {
    /// Batch loss at which proposals start.
    pub start_loss: f64,
    /// Iterations between weight snapshots.
    pub stride: usize,
    /// Snapshots per fit.
    pub window: usize,
    pub rank: Rank,
    /// Snapshot steps per proposal.
    pub p: usize,
    pub guard: GuardConfig,
    pub max_proposals: usize,
}

impl Default for KoopmanSchedule {
    fn default() -> Self {
        Self {
            start_loss: 1e-5,
            stride: 10,
            window: 40,
            rank: Rank::Fixed(4),
            p: 10,
            guard: GuardConfig::default(),
            max_proposals: 100,
        }
    }
}

impl KoopmanSchedule {
    pub fn validate(&self) -> Result<()> {
        self.guard.validate()?;
        if self.stride == 0 || self.p == 0 {
            return Err(Error::InvalidArgument("koopman stride and p must be positive".into()));
        }
        let needed = match self.rank {
            Rank::Fixed(0) => return Err(Error::InvalidArgument("rank must be positive".into())),
            Rank::Fixed(r) => (r + 1).max(3),
            Rank::Auto => 3,
        };
        if self.window < needed {
            return Err(Error::InsufficientSnapshots {
                required: needed,
                available: self.window,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct KoopmanOutcome {
    pub params: MlpParams,
    pub history: Vec<TrainRecord>,
    pub proposals: Vec<KoopmanStepReport>,
    pub stop: StopReason,
}

impl KoopmanOutcome {
    pub fn acceptance_rate(&self) -> Option<f64> {
        if self.proposals.is_empty() {
            return None;
        }
        let accepted = self.proposals.iter().filter(|r| r.accepted).count();
        Some(accepted as f64 / self.proposals.len() as f64)
    }
}

/// Residual training in which, once the batch loss reaches
/// `schedule.start_loss`, every `window` snapshots are fitted and a guarded
/// Koopman proposal replaces the next iteration. The snapshot buffer is
/// cleared after each proposal.
pub fn koopman_accelerated_train(
    mut params: MlpParams,
    schedule: &KoopmanSchedule,
    config: &TrainConfig,
    z0: &[f64],
    system: &SystemDef,
    mut monitor: Option<&mut dyn Monitor>,
) -> Result<KoopmanOutcome> {
    config.validate()?;
    schedule.validate()?;
    let mut rng = batch_rng(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, params.num_params());
    let mut history = Vec::new();
    let mut proposals = Vec::new();
    let mut buffer: Vec<Vec<f64>> = Vec::new();
    let mut since_snapshot = 0usize;
    let mut entered = false;
    let mut stop = StopReason::MaxIters;

    for iter in 0..config.max_iters {
        if let Some(m) = monitor.as_deref_mut() {
            if m.should_stop(iter, &params) {
                stop = StopReason::Monitor;
                break;
            }
        }
        if buffer.len() == schedule.window && proposals.len() < schedule.max_proposals {
            let started = Instant::now();
            let snaps = SnapshotMatrix::new(Observable::Weights, std::mem::take(&mut buffer), schedule.stride, 0, "")?;
            let model = fit(&snaps, schedule.rank, None)?;
            let report = koopman_train(
                &mut params,
                &model,
                schedule.p,
                &schedule.guard,
                z0,
                config.horizon,
                system,
            )?;
            let record = TrainRecord {
                iter,
                phase: Phase::Koopman,
                loss: if report.accepted {
                    report.loss_after
                } else {
                    report.loss_before
                },
                loss_components: Vec::new(),
                f_evals: report.f_evals,
                wall_time: started.elapsed().as_secs_f64(),
            };
            if let Some(m) = monitor.as_deref_mut() {
                m.observe(&record);
            }
            history.push(record);
            proposals.push(report);
            buffer.push(params.flatten());
            since_snapshot = 0;
            continue;
        }
        let batch = sample_batch(config, &mut rng);
        let record = train_step(&mut params, &batch, z0, system, &mut optimizer, iter)?;
        let done = record.loss <= config.loss_target;
        if !entered && record.loss <= schedule.start_loss {
            entered = true;
            buffer.push(params.flatten());
            since_snapshot = 0;
        } else if entered {
            since_snapshot += 1;
            if since_snapshot == schedule.stride {
                buffer.push(params.flatten());
                since_snapshot = 0;
            }
        }
        if let Some(m) = monitor.as_deref_mut() {
            m.observe(&record);
        }
        history.push(record);
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
    Ok(KoopmanOutcome {
        params,
        history,
        proposals,
        stop,
    })
}
