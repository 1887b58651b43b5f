use std::sync::Arc;

use nalgebra::DMatrix;

use super::{from_hamiltonian, HamiltonianSystem, HessianTensor, SystemDef};
use crate::error::{Error, Result};

pub const CATALOG: [&str; 4] = [
    "harmonic_oscillator",
    "nonlinear_pendulum",
    "cubic_oscillator",
    "henon_heiles",
];

/// Hénon–Heiles coupling.
const HH_LAMBDA: f64 = 1.0;

pub fn catalog_get(name: &str) -> Result<SystemDef> {
    let h = catalog_hamiltonian(name)?;
    let note = match name {
        "harmonic_oscillator" => "linear; valid on all of R^2",
        "nonlinear_pendulum" => "smooth on R^2; separatrix at H = 1",
        "cubic_oscillator" => "smooth on R^2; bounded orbits for every energy",
        _ => "smooth on R^4; orbits bounded for H < 1/6",
    };
    Ok(from_hamiltonian(&h)?.with_domain_note(note))
}

/// The Hamiltonian behind a catalog entry, with `z = (q, p)` ordering.
pub fn catalog_hamiltonian(name: &str) -> Result<HamiltonianSystem> {
    let sys = match name {
        "harmonic_oscillator" => HamiltonianSystem {
            name: name.into(),
            dim: 2,
            hamiltonian: Arc::new(|z| 0.5 * (z[0] * z[0] + z[1] * z[1])),
            grad_h: Arc::new(|z| vec![z[0], z[1]]),
            hessian_h: Arc::new(|_| DMatrix::identity(2, 2)),
            third_h: Some(Arc::new(|_| HessianTensor::zeros(2))),
        },
        "nonlinear_pendulum" => HamiltonianSystem {
            name: name.into(),
            dim: 2,
            hamiltonian: Arc::new(|z| 0.5 * z[1] * z[1] - z[0].cos()),
            grad_h: Arc::new(|z| vec![z[0].sin(), z[1]]),
            hessian_h: Arc::new(|z| DMatrix::from_row_slice(2, 2, &[z[0].cos(), 0.0, 0.0, 1.0])),
            third_h: Some(Arc::new(|z| {
                let mut t = HessianTensor::zeros(2);
                t.set(0, 0, 0, -z[0].sin());
                t
            })),
        },
        "cubic_oscillator" => HamiltonianSystem {
            name: name.into(),
            dim: 2,
            hamiltonian: Arc::new(|z| {
                let q2 = z[0] * z[0];
                0.5 * z[1] * z[1] + 0.5 * q2 + 0.25 * q2 * q2
            }),
            grad_h: Arc::new(|z| vec![z[0] + z[0].powi(3), z[1]]),
            hessian_h: Arc::new(|z| DMatrix::from_row_slice(2, 2, &[1.0 + 3.0 * z[0] * z[0], 0.0, 0.0, 1.0])),
            third_h: Some(Arc::new(|z| {
                let mut t = HessianTensor::zeros(2);
                t.set(0, 0, 0, 6.0 * z[0]);
                t
            })),
        },
        "henon_heiles" => HamiltonianSystem {
            // z = (x, y, p_x, p_y)
            name: name.into(),
            dim: 4,
            hamiltonian: Arc::new(|z| {
                let (x, y, px, py) = (z[0], z[1], z[2], z[3]);
                0.5 * (px * px + py * py) + 0.5 * (x * x + y * y) + HH_LAMBDA * (x * x * y - y * y * y / 3.0)
            }),
            grad_h: Arc::new(|z| {
                let (x, y) = (z[0], z[1]);
                vec![x + 2.0 * HH_LAMBDA * x * y, y + HH_LAMBDA * (x * x - y * y), z[2], z[3]]
            }),
            hessian_h: Arc::new(|z| {
                let (x, y) = (z[0], z[1]);
                let mut m = DMatrix::zeros(4, 4);
                m[(0, 0)] = 1.0 + 2.0 * HH_LAMBDA * y;
                m[(0, 1)] = 2.0 * HH_LAMBDA * x;
                m[(1, 0)] = 2.0 * HH_LAMBDA * x;
                m[(1, 1)] = 1.0 - 2.0 * HH_LAMBDA * y;
                m[(2, 2)] = 1.0;
                m[(3, 3)] = 1.0;
                m
            }),
            third_h: Some(Arc::new(|_| {
                let mut t = HessianTensor::zeros(4);
                // H_xxy and its permutations, H_yyy
                t.set(0, 0, 1, 2.0 * HH_LAMBDA);
                t.set(0, 1, 0, 2.0 * HH_LAMBDA);
                t.set(1, 0, 0, 2.0 * HH_LAMBDA);
                t.set(1, 1, 1, -2.0 * HH_LAMBDA);
                t
            })),
        },
        _ => {
            return Err(Error::UnknownSystem {
                name: name.to_string(),
                available: CATALOG.to_vec(),
            })
        }
    };
    Ok(sys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn harmonic_oscillator_hand_values() {
        let s = catalog_get("harmonic_oscillator").unwrap();
        assert_eq!(s.f(&[1.0, 0.0]), vec![0.0, -1.0]);
        assert_eq!(
            s.jacobian(&[1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
        );
    }

    #[test]
    fn pendulum_fixed_point() {
        let s = catalog_get("nonlinear_pendulum").unwrap();
        assert_eq!(s.f(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(
            s.jacobian(&[0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
        );
    }

    #[test]
    fn cubic_hessian_single_entry() {
        let s = catalog_get("cubic_oscillator").unwrap();
        let h = s.hessian(&[2.0, 0.0]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let expected = if (i, j, k) == (1, 0, 0) { -12.0 } else { 0.0 };
                    assert_eq!(h.get(i, j, k), expected, "entry {i}{j}{k}");
                }
            }
        }
    }

    #[test]
    fn catalog_forms_match_closed_forms() {
        let z = [0.4, -0.7];
        assert_eq!(
            catalog_get("nonlinear_pendulum").unwrap().f(&z),
            vec![-0.7, -(0.4f64.sin())]
        );
        let c = catalog_get("cubic_oscillator").unwrap().f(&z);
        assert!((c[1] - (-0.4 - 0.064)).abs() < 1e-15);
    }

    #[test]
    fn unknown_name_lists_catalog() {
        let err = catalog_get("lorenz").unwrap_err().to_string();
        for name in CATALOG {
            assert!(err.contains(name), "{err}");
        }
    }

    /// Jacobian and Hessian tensor against central differences at 100
    /// random points per system.
    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for name in CATALOG {
            let s = catalog_get(name).unwrap();
            let d = s.dim();
            for _ in 0..100 {
                let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
                let jac = s.jacobian(&z);
                let hess = s.hessian(&z).unwrap();
                assert!(hess.max_asymmetry() == 0.0, "{name}: asymmetric hessian");
                for k in 0..d {
                    let mut zp = z.clone();
                    let mut zm = z.clone();
                    zp[k] += h;
                    zm[k] -= h;
                    let fp = s.f(&zp);
                    let fm = s.f(&zm);
                    let jp = s.jacobian(&zp);
                    let jm = s.jacobian(&zm);
                    for i in 0..d {
                        let fd = (fp[i] - fm[i]) / (2.0 * h);
                        assert!(rel_err(fd, jac[(i, k)]) < 1e-6, "{name} J[{i}][{k}]");
                        for j in 0..d {
                            let fd2 = (jp[(i, j)] - jm[(i, j)]) / (2.0 * h);
                            assert!(rel_err(fd2, hess.get(i, j, k)) < 1e-5, "{name} H[{i}][{j}][{k}]");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn vector_field_is_symplectic_gradient() {
        let j = super::super::symplectic(4).unwrap();
        let hs = catalog_hamiltonian("henon_heiles").unwrap();
        let s = catalog_get("henon_heiles").unwrap();
        let z = [0.1, -0.2, 0.3, 0.05];
        let expected = &j * nalgebra::DVector::from_vec((hs.grad_h)(&z));
        let got = s.f(&z);
        for i in 0..4 {
            assert!((got[i] - expected[i]).abs() < 1e-15);
        }
    }
}
