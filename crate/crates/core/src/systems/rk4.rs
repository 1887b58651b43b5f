use serde::{Deserialize, Serialize};

use super::SystemDef;
use crate::error::{Error, Result};

pub const DEFAULT_H_MAX: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub method: String,
    /// Largest internal substep actually used.
    pub step: f64,
}

/// Classical fourth-order Runge–Kutta. Every requested grid point is a
/// substep boundary; each interval is split into equal substeps no longer
/// than `h_max`.
pub fn rk4_solve(system: &SystemDef, z0: &[f64], grid: &[f64], h_max: f64) -> Result<ReferenceTrajectory> {
    if z0.len() != system.dim() {
        return Err(Error::Dimension {
            expected: system.dim(),
            got: z0.len(),
            context: "rk4 initial state",
        });
    }
    if !(h_max > 0.0) {
        return Err(Error::InvalidArgument(format!("h_max must be positive, got {h_max}")));
    }
    match grid.first() {
        Some(&t0) if t0 == 0.0 => {}
        _ => return Err(Error::InvalidArgument("time grid must start at 0".into())),
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("time grid must be strictly increasing".into()));
    }

    let dim = z0.len();
    let mut states = Vec::with_capacity(grid.len());
    states.push(z0.to_vec());
    let mut z = z0.to_vec();
    let mut tmp = vec![0.0; dim];
    let mut largest = 0.0f64;

    for w in grid.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let n_sub = ((tb - ta) / h_max).ceil().max(1.0) as usize;
        let h = (tb - ta) / n_sub as f64;
        largest = largest.max(h);
        for s in 0..n_sub {
            let t = ta + s as f64 * h;
            let k1 = system.f(&z);
            for i in 0..dim {
                tmp[i] = z[i] + 0.5 * h * k1[i];
            }
            let k2 = system.f(&tmp);
            for i in 0..dim {
                tmp[i] = z[i] + 0.5 * h * k2[i];
            }
            let k3 = system.f(&tmp);
            for i in 0..dim {
                tmp[i] = z[i] + h * k3[i];
            }
            let k4 = system.f(&tmp);
            for i in 0..dim {
                z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { t: t + h });
            }
        }
        states.push(z.clone());
    }

    Ok(ReferenceTrajectory {
        times: grid.to_vec(),
        states,
        method: "rk4".into(),
        step: largest,
    })
}
