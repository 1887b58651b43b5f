//! Reverse-mode residual gradients against central finite differences.

use dynflow::net::MlpParams;
use dynflow::systems::catalog_get;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn fd_grad(p: &MlpParams, idx: usize, batch: &[f64], z0: &[f64], sys: &dynflow::systems::SystemDef) -> f64 {
    let mut flat = p.flatten();
    let w = flat[idx];
    flat[idx] = w + STEP;
    let lp = MlpParams::from_flat(p, &flat)
        .unwrap()
        .residual_loss(batch, z0, sys)
        .unwrap()
        .0;
    flat[idx] = w - STEP;
    let lm = MlpParams::from_flat(p, &flat)
        .unwrap()
        .residual_loss(batch, z0, sys)
        .unwrap()
        .0;
    (lp - lm) / (2.0 * STEP)
}

fn worst_relative_error(name: &str, z0: &[f64], seed: u64) -> f64 {
    let sys = catalog_get(name).unwrap();
    let p = MlpParams::for_system(16, z0.len(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut batch: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..2.0)).collect();
    batch.push(0.0);
    let analytic = p.residual_loss_grad(&batch, z0, &sys).unwrap().grad.flatten();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let idx = rng.random_range(0..analytic.len());
        let fd = fd_grad(&p, idx, &batch, z0, &sys);
        let a = analytic[idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradients_match_finite_differences_on_three_systems() {
    for (name, z0) in [
        ("harmonic_oscillator", vec![1.0, 0.0]),
        ("cubic_oscillator", vec![1.0, 0.0]),
        ("henon_heiles", vec![0.2, -0.1, 0.1, 0.25]),
    ] {
        for seed in [1, 2, 3] {
            let worst = worst_relative_error(name, &z0, seed);
            assert!(worst <= 1e-5, "{name} seed {seed}: worst relative error {worst:e}");
        }
    }
}

#[test]
fn every_layer_receives_correct_gradient() {
    let sys = catalog_get("nonlinear_pendulum").unwrap();
    let z0 = [0.5, 0.1];
    let p = MlpParams::for_system(6, 2, 42).unwrap();
    let batch = [0.0, 0.4, 1.1, 2.5];
    let analytic = p.residual_loss_grad(&batch, &z0, &sys).unwrap().grad.flatten();
    for idx in 0..analytic.len() {
        let fd = fd_grad(&p, idx, &batch, &z0, &sys);
        let a = analytic[idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        assert!(rel <= 1e-5, "param {idx}: analytic {a:e} fd {fd:e}");
    }
}

#[test]
fn supervised_gradient_matches_finite_differences() {
    let p = MlpParams::for_system(8, 2, 5).unwrap();
    let z0 = [1.0, 0.0];
    let times = [0.0, 0.3, 0.8, 1.7];
    let targets: Vec<Vec<f64>> = times.iter().map(|t: &f64| vec![t.cos(), -t.sin()]).collect();
    let refs: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
    let analytic = p.fit_loss_grad(&times, &refs, &z0).unwrap().grad.flatten();
    let mut flat = p.flatten();
    for idx in 0..flat.len() {
        let w = flat[idx];
        flat[idx] = w + STEP;
        let lp = MlpParams::from_flat(&p, &flat)
            .unwrap()
            .fit_loss_grad(&times, &refs, &z0)
            .unwrap()
            .loss;
        flat[idx] = w - STEP;
        let lm = MlpParams::from_flat(&p, &flat)
            .unwrap()
            .fit_loss_grad(&times, &refs, &z0)
            .unwrap()
            .loss;
        flat[idx] = w;
        let fd = (lp - lm) / (2.0 * STEP);
        let rel = (analytic[idx] - fd).abs() / analytic[idx].abs().max(fd.abs()).max(1e-8);
        assert!(rel <= 1e-5, "param {idx}");
    }
}
