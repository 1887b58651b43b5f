//! Smooth dynamical systems `ż = F(z)` with analytic first and second
//! derivatives, the Hamiltonian special case, and the RK4 reference solver.

mod catalog;
mod rk4;

pub use catalog::{catalog_get, catalog_hamiltonian, CATALOG};
pub use rk4::{rk4_solve, ReferenceTrajectory, DEFAULT_H_MAX};

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type TensorFn = Arc<dyn Fn(&[f64]) -> HessianTensor + Send + Sync>;

/// Dense `D×D×D` tensor `T[i][j][k] = ∂²F_i / ∂z_j ∂z_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianTensor {
    dim: usize,
    data: Vec<f64>,
}

impl HessianTensor {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dim + j) * self.dim + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let at = self.idx(i, j, k);
        self.data[at] = v;
    }

    /// Sets `T[i][j][k]` and `T[i][k][j]`.
    pub fn set_sym(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.set(i, j, k, v);
        self.set(i, k, j, v);
    }

    /// `out_i = Σ_jk T[i][j][k]·v_j·v_k`.
    pub fn quadratic_form(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..d {
                    for k in 0..d {
                        acc += self.get(i, j, k) * v[j] * v[k];
                    }
                }
                acc
            })
            .collect()
    }

    /// Largest `|T[i][j][k] − T[i][k][j]|`.
    pub fn max_asymmetry(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    worst = worst.max((self.get(i, j, k) - self.get(i, k, j)).abs());
                }
            }
        }
        worst
    }
}

/// Evaluation counts of a [`SystemDef`], shared among its clones.
#[derive(Debug, Default)]
pub struct EvalCounters {
    f: AtomicU64,
    jacobian: AtomicU64,
    hessian: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub f: u64,
    pub jacobian: u64,
    pub hessian: u64,
}

/// The operator `F` of `ż = F(z)` with its Jacobian and (optionally) its
/// Hessian tensor. Every evaluation is counted.
#[derive(Clone)]
pub struct SystemDef {
    name: String,
    dim: usize,
    f: VectorFn,
    jacobian: MatrixFn,
    hessian: Option<TensorFn>,
    energy: Option<ScalarFn>,
    domain_note: String,
    counters: Arc<EvalCounters>,
}

impl fmt::Debug for SystemDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemDef")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("has_hessian", &self.hessian.is_some())
            .field("counts", &self.counts())
            .finish()
    }
}

impl SystemDef {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        f: VectorFn,
        jacobian: MatrixFn,
        hessian: Option<TensorFn>,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            f,
            jacobian,
            hessian,
            energy: None,
            domain_note: String::new(),
            counters: Arc::default(),
        }
    }

    pub fn with_domain_note(mut self, note: impl Into<String>) -> Self {
        self.domain_note = note.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain_note(&self) -> &str {
        &self.domain_note
    }

    pub fn has_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    /// Conserved energy, when the system came from a Hamiltonian.
    pub fn energy(&self, z: &[f64]) -> Option<f64> {
        self.energy.as_ref().map(|h| h(z))
    }

    pub fn f(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.dim);
        self.counters.f.fetch_add(1, Ordering::Relaxed);
        (self.f)(z)
    }

    pub fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        debug_assert_eq!(z.len(), self.dim);
        self.counters.jacobian.fetch_add(1, Ordering::Relaxed);
        (self.jacobian)(z)
    }

    pub fn hessian(&self, z: &[f64]) -> Option<HessianTensor> {
        let h = self.hessian.as_ref()?;
        self.counters.hessian.fetch_add(1, Ordering::Relaxed);
        Some(h(z))
    }

    pub fn counts(&self) -> EvalCounts {
        EvalCounts {
            f: self.counters.f.load(Ordering::Relaxed),
            jacobian: self.counters.jacobian.load(Ordering::Relaxed),
            hessian: self.counters.hessian.load(Ordering::Relaxed),
        }
    }

    /// Same system with its own zeroed counters.
    pub fn with_fresh_counters(&self) -> Self {
        let mut s = self.clone();
        s.counters = Arc::default();
        s
    }
}

/// A Hamiltonian system on `z = (q, p)`, with `D = 2n`.
#[derive(Clone)]
pub struct HamiltonianSystem {
    pub name: String,
    pub dim: usize,
    pub hamiltonian: ScalarFn,
    pub grad_h: VectorFn,
    /// Hessian of `H`; required for the Jacobian of `F = J·∇H`.
    pub hessian_h: MatrixFn,
    /// Third derivatives `∂³H/∂z_m∂z_j∂z_k` stored as `T[m][j][k]`.
    pub third_h: Option<TensorFn>,
}

/// The canonical symplectic matrix `[[0, I], [−I, 0]]`.
pub fn symplectic(dim: usize) -> Result<DMatrix<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "symplectic form needs an even positive dimension, got {dim}"
        )));
    }
    let n = dim / 2;
    let mut j = DMatrix::zeros(dim, dim);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    Ok(j)
}

fn apply_symplectic(v: &[f64]) -> Vec<f64> {
    let n = v.len() / 2;
    let mut out = Vec::with_capacity(v.len());
    out.extend_from_slice(&v[n..]);
    out.extend(v[..n].iter().map(|x| -x));
    out
}

/// Builds `F(z) = J·∇H(z)` with `F_z = J·∇²H` and `F_zz = J·∇³H`.
pub fn from_hamiltonian(h: &HamiltonianSystem) -> Result<SystemDef> {
    let dim = h.dim;
    let j = symplectic(dim)?;
    check_gradient_consistency(h)?;

    let grad = h.grad_h.clone();
    let f: VectorFn = Arc::new(move |z| apply_symplectic(&grad(z)));

    let hess = h.hessian_h.clone();
    let jj = j.clone();
    let jac: MatrixFn = Arc::new(move |z| &jj * hess(z));

    let hessian: Option<TensorFn> = h.third_h.clone().map(|third| {
        let n = dim / 2;
        Arc::new(move |z: &[f64]| {
            let t = third(z);
            let mut out = HessianTensor::zeros(dim);
            for jdx in 0..dim {
                for k in 0..dim {
                    for i in 0..n {
                        // row i of J picks +∂_{p_i}, row n+i picks −∂_{q_i}
                        out.set(i, jdx, k, t.get(n + i, jdx, k));
                        out.set(n + i, jdx, k, -t.get(i, jdx, k));
                    }
                }
            }
            out
        }) as TensorFn
    });

    let mut sys = SystemDef::new(h.name.clone(), dim, f, jac, hessian);
    sys.energy = Some(h.hamiltonian.clone());
    Ok(sys)
}

fn check_gradient_consistency(h: &HamiltonianSystem) -> Result<()> {
    let step = 1e-6;
    for probe in 0..3 {
        let z: Vec<f64> = (0..h.dim)
            .map(|i| 0.3 * ((probe * h.dim + i) as f64 * 1.7 + 0.4).sin())
            .collect();
        let g = (h.grad_h)(&z);
        if g.len() != h.dim {
            return Err(Error::Dimension {
                expected: h.dim,
                got: g.len(),
                context: "hamiltonian gradient",
            });
        }
        for i in 0..h.dim {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += step;
            zm[i] -= step;
            let fd = ((h.hamiltonian)(&zp) - (h.hamiltonian)(&zm)) / (2.0 * step);
            if (fd - g[i]).abs() > 1e-5 * (1.0 + g[i].abs()) {
                return Err(Error::InvalidArgument(format!(
                    "gradient of `{}` inconsistent with H in component {i}: analytic {} vs finite difference {fd}",
                    h.name, g[i]
                )));
            }
        }
    }
    Ok(())
}
