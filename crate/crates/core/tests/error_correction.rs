//! Estimator and bound checks on trained networks, with RK4 as the oracle.

use dynflow::error_correction::{
    build_ec_dataset, error_bound, estimate_delta_z, residual_profile, ErrorEstimate, TaylorOrder,
};
use dynflow::net::MlpParams;
use dynflow::systems::{catalog_get, rk4_solve, SystemDef, DEFAULT_H_MAX};
use dynflow::training::{train_until, TrainConfig};

const GRID_INTERVALS: usize = 20_000;

fn trained(system: &SystemDef, z0: &[f64], horizon: f64, target: f64) -> MlpParams {
    let config = TrainConfig {
        horizon,
        loss_target: target,
        max_iters: 20_000,
        ..TrainConfig::default()
    };
    let net = MlpParams::for_system(32, z0.len(), 1).unwrap();
    let out = train_until(net, &config, z0, system).unwrap();
    assert!(out.converged(), "loss {:?} above {target}", out.final_loss());
    out.params
}

/// True error z − ẑ on the estimator grid.
fn oracle_delta(params: &MlpParams, est: &ErrorEstimate, z0: &[f64], system: &SystemDef) -> Vec<Vec<f64>> {
    let reference = rk4_solve(system, z0, &est.times, DEFAULT_H_MAX).unwrap();
    est.times
        .iter()
        .zip(&reference.states)
        .map(|(&t, z)| {
            let zh = params.predict(t, z0);
            z.iter().zip(&zh).map(|(a, b)| a - b).collect()
        })
        .collect()
}

fn relative_linf(estimate: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (e, t) in estimate.iter().zip(truth) {
        for (a, b) in e.iter().zip(t) {
            diff = diff.max((a - b).abs());
            scale = scale.max(b.abs());
        }
    }
    diff / scale
}

fn estimate(params: &MlpParams, z0: &[f64], system: &SystemDef, horizon: f64, order: TaylorOrder) -> ErrorEstimate {
    let prof = residual_profile(params, z0, system, horizon / GRID_INTERVALS as f64, horizon).unwrap();
    estimate_delta_z(&prof, system, order).unwrap()
}

#[test]
fn cubic_second_order_estimate_tracks_rk4() {
    let sys = catalog_get("cubic_oscillator").unwrap();
    let z0 = [1.0, 0.0];
    let params = trained(&sys, &z0, 2.0, 1e-6);
    let est = estimate(&params, &z0, &sys, 2.0, TaylorOrder::Second);
    let truth = oracle_delta(&params, &est, &z0, &sys);
    let rel = relative_linf(&est.delta_z, &truth);
    println!("cubic order-2 relative L-inf error {rel:.3e}");
    assert!(rel <= 0.05, "relative error {rel}");
}

fn ladder(name: &str, z0: &[f64], horizon: f64, relative: bool) -> Vec<f64> {
    let sys = catalog_get(name).unwrap();
    [1e-4, 1e-5, 1e-6]
        .iter()
        .map(|&target| {
            let params = trained(&sys, z0, horizon, target);
            let est = estimate(&params, z0, &sys, horizon, TaylorOrder::First);
            let truth = oracle_delta(&params, &est, z0, &sys);
            if relative {
                relative_linf(&est.delta_z, &truth)
            } else {
                relative_linf(&est.delta_z, &truth) * truth.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()))
            }
        })
        .collect()
}

#[test]
fn estimator_agreement_improves_with_training() {
    let cubic = ladder("cubic_oscillator", &[1.0, 0.0], 2.0, true);
    let linear = ladder("harmonic_oscillator", &[1.0, 0.0], std::f64::consts::PI, false);
    println!("ladder cubic relative {cubic:?}, linear absolute {linear:?}");
    assert!(cubic.windows(2).all(|w| w[1] < w[0]), "{cubic:?}");
    assert!(linear.windows(2).all(|w| w[1] < w[0]), "{linear:?}");
}

#[test]
fn bound_holds_on_converged_harmonic_run() {
    let sys = catalog_get("harmonic_oscillator").unwrap();
    let z0 = [1.0, 0.0];
    let horizon = std::f64::consts::PI;
    let params = trained(&sys, &z0, horizon, 1e-6);
    let prof = residual_profile(&params, &z0, &sys, horizon / GRID_INTERVALS as f64, horizon).unwrap();
    let bound = error_bound(&prof, &sys);
    let est = estimate_delta_z(&prof, &sys, TaylorOrder::First).unwrap();
    let worst = oracle_delta(&params, &est, &z0, &sys)
        .iter()
        .flatten()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    println!("max |dz| {worst:.3e}, bound {:.3e}", bound.bound);
    assert!(worst < bound.bound);
}

#[test]
fn corrected_dataset_is_closer_to_truth() {
    let sys = catalog_get("harmonic_oscillator").unwrap();
    let z0 = [1.0, 0.0];
    let horizon = std::f64::consts::PI;
    let params = trained(&sys, &z0, horizon, 1e-5);
    let est = estimate(&params, &z0, &sys, horizon, TaylorOrder::Second);
    let ec = build_ec_dataset(&params, &est, &z0, 10, 100, 0).unwrap();
    assert_eq!(ec.len(), 1000);
    let reference = rk4_solve(&sys, &z0, &ec.times, DEFAULT_H_MAX).unwrap();
    let gap = |zs: &[Vec<f64>]| {
        zs.iter()
            .zip(&reference.states)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0f64, f64::max)
    };
    let (before, after) = (gap(&ec.z_hat), gap(&ec.z_ec));
    println!("max error before {before:.3e}, after {after:.3e}");
    assert!(after <= before);
}
