//! DMD fits against flows whose generator is known.

use dynflow::koopman::{
    fit, koopman_train_flat, linearity_check, record_losses, record_weights, Observable, Rank, SnapshotMatrix,
};
use dynflow::net::MlpParams;
use dynflow::systems::catalog_get;
use dynflow::training::{train_until, TrainConfig};
use nalgebra::Complex;
use proptest::prelude::*;

fn iterate(a: &[Vec<f64>], x0: &[f64], steps: usize) -> Vec<Vec<f64>> {
    let mut out = vec![x0.to_vec()];
    for _ in 0..steps {
        let x = out.last().unwrap();
        out.push(
            a.iter()
                .map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum())
                .collect(),
        );
    }
    out
}

fn snapshots(columns: Vec<Vec<f64>>) -> SnapshotMatrix {
    SnapshotMatrix::new(Observable::Custom, columns, 1, 0, "test").unwrap()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n
}

/// Gradient descent on ½wᵀQw with Q = diag(1, 3): w ← (I − 0.1 Q) w.
fn gd_quadratic(w0: &[f64], steps: usize) -> Vec<Vec<f64>> {
    let mut out = vec![w0.to_vec()];
    for _ in 0..steps {
        let w = out.last().unwrap();
        let grad = [w[0], 3.0 * w[1]];
        out.push(vec![w[0] - 0.1 * grad[0], w[1] - 0.1 * grad[1]]);
    }
    out
}

#[test]
fn geometric_scalar_sequence() {
    let model = fit(
        &snapshots(vec![vec![1.0], vec![0.5], vec![0.25], vec![0.125]]),
        Rank::Auto,
        None,
    )
    .unwrap();
    assert_eq!(model.rank, 1);
    assert!((model.eigenvalues[0] - Complex::new(0.5, 0.0)).norm() < 1e-12);
    assert!(model.residual <= 1e-12);
    assert!((model.propagate(3)[0] - 0.125).abs() < 1e-12);
}

#[test]
fn diagonal_map_eigenvalues() {
    let a = vec![vec![0.9, 0.0], vec![0.0, -0.5]];
    let model = fit(&snapshots(iterate(&a, &[1.0, 1.0], 6)), Rank::Auto, None).unwrap();
    assert_eq!(model.rank, 2);
    assert!((model.eigenvalues[0] - Complex::new(0.9, 0.0)).norm() < 1e-10);
    assert!((model.eigenvalues[1] - Complex::new(-0.5, 0.0)).norm() < 1e-10);
}

#[test]
fn gradient_descent_on_quadratic() {
    let flow = gd_quadratic(&[1.0, 1.0], 10);
    let model = fit(&snapshots(flow), Rank::Auto, None).unwrap();
    let mut mus: Vec<f64> = model.eigenvalues.iter().map(|m| m.re).collect();
    mus.sort_by(|a, b| b.total_cmp(a));
    assert!((mus[0] - 0.9).abs() < 1e-8 && (mus[1] - 0.7).abs() < 1e-8, "{mus:?}");
    assert!(model.eigenvalues.iter().all(|m| m.im == 0.0));

    let exact = [0.9f64.powi(50), 0.7f64.powi(50)];
    assert!(rel(&model.propagate(50), &exact) < 1e-8);

    let lp = model.limit_point();
    assert!(lp.converges);
    assert_eq!(lp.unit_modes, 0);
    assert!(lp.limit.iter().all(|x| x.abs() < 1e-6), "{:?}", lp.limit);
    assert!(model.offset.iter().all(|x| x.abs() < 1e-6));
}

#[test]
fn koopman_steps_match_true_descent() {
    let flow = gd_quadratic(&[1.0, -2.0], 8);
    let model = fit(&snapshots(flow.clone()), Rank::Auto, None).unwrap();
    let start = flow[5].clone();
    let mut w = start.clone();
    let loss = |w: &[f64]| Ok(0.5 * (w[0] * w[0] + 3.0 * w[1] * w[1]));
    let (accepted, before, after) = koopman_train_flat(&mut w, &model, 20, 0.05, loss).unwrap();
    assert!(accepted && after < before);
    let truth = gd_quadratic(&start, 20).pop().unwrap();
    let err = w.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "{err}");

    let mut same = start.clone();
    koopman_train_flat(&mut same, &model, 0, 0.05, loss).unwrap();
    assert_eq!(same, start);
}

#[test]
fn offset_flow_limit_is_its_fixed_point() {
    // w ← w − 0.1 Q (w − c): gradient descent towards c = (2, −1).
    let c = [2.0, -1.0];
    let mut flow = vec![vec![0.0, 0.0]];
    for _ in 0..8 {
        let w = flow.last().unwrap();
        flow.push(vec![w[0] - 0.1 * (w[0] - c[0]), w[1] - 0.3 * (w[1] - c[1])]);
    }
    let model = fit(&snapshots(flow), Rank::Auto, None).unwrap();
    let lp = model.limit_point();
    assert!(lp.converges);
    assert!(rel(&lp.limit, &c) < 1e-10, "{:?}", lp.limit);
}

#[test]
fn unit_mode_sets_the_limit() {
    // One frozen coordinate and one decaying coordinate.
    let flow: Vec<Vec<f64>> = (0..6).map(|t| vec![3.0, 0.5f64.powi(t)]).collect();
    let model = fit(&snapshots(flow), Rank::Auto, None).unwrap();
    let lp = model.limit_point();
    assert!(lp.converges);
    assert!(rel(&lp.limit, &[3.0, 0.0]) < 1e-10, "{:?}", lp.limit);
}

#[test]
fn rotation_has_conjugate_pair_and_does_not_converge() {
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    let a = vec![vec![c, -s], vec![s, c]];
    let model = fit(&snapshots(iterate(&a, &[1.0, 0.0], 8)), Rank::Auto, None).unwrap();
    let (p, q) = (model.eigenvalues[0], model.eigenvalues[1]);
    assert!((p - q.conj()).norm() <= 1e-10);
    assert!((p.im.abs() - s).abs() < 1e-10);
    assert!(!model.limit_point().converges);
    let (x, imag) = model.propagate_with_residue(17);
    assert!(imag <= 1e-8);
    assert!(rel(&x, &iterate(&a, &[1.0, 0.0], 17)[17]) < 1e-8);
}

#[test]
fn constant_snapshots_give_single_unit_mode() {
    let model = fit(&snapshots(vec![vec![2.0, -1.0]; 5]), Rank::Auto, None).unwrap();
    assert_eq!(model.rank, 1);
    assert_eq!(model.eigenvalues, vec![Complex::new(1.0, 0.0)]);
    assert!(rel(&model.propagate(40), &[2.0, -1.0]) < 1e-15);
    let lp = model.limit_point();
    assert!(lp.converges && rel(&lp.limit, &[2.0, -1.0]) < 1e-15);
}

#[test]
fn excessive_rank_is_reduced_with_warning() {
    let model = fit(&snapshots(gd_quadratic(&[1.0, 1.0], 10)), Rank::Fixed(5), None).unwrap();
    assert_eq!(model.rank, 2);
    assert_eq!(model.warnings.len(), 1);
}

#[test]
fn window_rules() {
    let s = snapshots(gd_quadratic(&[1.0, 1.0], 4));
    assert!(fit(&s, Rank::Fixed(2), Some(6)).is_err());
    assert!(fit(&s, Rank::Fixed(5), None).is_err());
    let tail = fit(&s, Rank::Auto, Some(3)).unwrap();
    assert_eq!(tail.origin_iter, 2);
    assert!(rel(&tail.propagate(0), &s.columns[2]) < 1e-10);
}

#[test]
fn linearity_of_shared_dynamics() {
    let cols: Vec<Vec<f64>> = (0..8)
        .map(|t| vec![2.0 * 0.8f64.powi(t), 0.5 * 0.8f64.powi(t)])
        .collect();
    let report = linearity_check(&snapshots(cols), Rank::Auto, None).unwrap();
    assert!(report.max_discrepancy <= 1e-10, "{}", report.max_discrepancy);
    assert_eq!(report.steps, 8);

    let single: Vec<Vec<f64>> = (0..8).map(|t| vec![0.9f64.powi(t) + 0.1]).collect();
    let report = linearity_check(&snapshots(single), Rank::Auto, None).unwrap();
    assert_eq!(report.max_discrepancy, 0.0);
}

#[test]
fn records_from_training() {
    let sys = catalog_get("harmonic_oscillator").unwrap();
    let config = TrainConfig {
        batch_size: 20,
        max_iters: 100,
        loss_target: 0.0,
        snapshot_every: 10,
        ..TrainConfig::default()
    };
    let net = MlpParams::for_system(4, 2, 1).unwrap();
    let n = net.num_params();
    let out = train_until(net, &config, &[1.0, 0.0], &sys).unwrap();

    let w = record_weights(&out.snapshots, "run").unwrap();
    assert_eq!((w.rows(), w.len(), w.stride), (n, 11, 10));

    let comps = record_losses(&out.history, Observable::LossComponents, 1, "run").unwrap();
    assert_eq!(comps.rows(), 2);
    for (c, r) in comps.columns.iter().zip(&out.history) {
        assert!((c.iter().sum::<f64>() - r.loss).abs() <= 1e-15 * r.loss.max(1.0));
    }
    let loss = record_losses(&out.history, Observable::Loss, 10, "run").unwrap();
    assert_eq!(loss.len(), 10);
}

#[test]
fn snapshot_csv_round_trip() {
    let s = SnapshotMatrix::new(
        Observable::Weights,
        vec![vec![0.1, -2.5e-17], vec![1.0 / 3.0, 4.0], vec![5.0, f64::MIN_POSITIVE]],
        10,
        20,
        "run-7",
    )
    .unwrap();
    let text = s.to_csv();
    assert!(text.starts_with("# observable=weights stride=10 source_run=run-7\nrow,20,30,40\n"));
    assert_eq!(SnapshotMatrix::from_csv(&text).unwrap(), s);
}

#[test]
fn ragged_and_short_records_rejected() {
    assert!(SnapshotMatrix::new(Observable::Custom, vec![vec![1.0]; 2], 1, 0, "").is_err());
    assert!(SnapshotMatrix::new(Observable::Custom, vec![vec![1.0], vec![1.0, 2.0], vec![1.0]], 1, 0, "").is_err());
    assert!(SnapshotMatrix::from_csv("# observable=loss stride=2 source_run=x\nrow,0,2,5\nx_1,1,2,3\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Linear maps with spectral radius below one and a generic start vector
    /// are recovered exactly, including complex spectra.
    #[test]
    fn linear_flows_are_recovered(
        entries in prop::collection::vec(-0.6f64..0.6, 9),
        x0 in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let a: Vec<Vec<f64>> = entries.chunks(3).map(|r| r.to_vec()).collect();
        let flow = iterate(&a, &x0, 12);
        let m = nalgebra::DMatrix::from_fn(3, 3, |i, j| a[i][j]);
        let true_mus = m.complex_eigenvalues();
        let gap = |u: Complex<f64>, v: Complex<f64>| (u - v).norm();
        // Skip near-defective or degenerate draws where eigenvalues are ill-conditioned.
        let min_sep = (0..3)
            .flat_map(|i| (i + 1..3).map(move |j| (i, j)))
            .map(|(i, j)| gap(true_mus[i], true_mus[j]))
            .fold(f64::INFINITY, f64::min);
        prop_assume!(min_sep > 0.05 && true_mus.iter().all(|m| m.norm() > 0.05));
        let krylov = nalgebra::DMatrix::from_fn(3, 3, |i, j| flow[j][i]);
        prop_assume!(krylov.svd(false, false).singular_values.min() > 1e-3);

        let model = fit(&snapshots(flow.clone()), Rank::Auto, None).unwrap();
        prop_assert_eq!(model.rank, 3);
        for mu in &true_mus {
            let best = model.eigenvalues.iter().map(|e| gap(*e, *mu)).fold(f64::INFINITY, f64::min);
            prop_assert!(best < 1e-8, "eigenvalue {} off by {}", mu, best);
        }
        prop_assert!(rel(&model.propagate(0), &flow[0]) < 1e-10);
        // Iterates decay, so errors are measured against the trajectory scale.
        let scale = flow.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
        for (t, x) in flow.iter().enumerate() {
            let p = model.propagate(t);
            let d = p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d <= 1e-8 * scale, "t {} error {}", t, d);
        }
        for (i, e) in model.eigenvalues.iter().enumerate() {
            if e.im != 0.0 {
                let paired = model.eigenvalues.iter().enumerate().any(|(j, f)| j != i && gap(*f, e.conj()) <= 1e-10);
                prop_assert!(paired);
            }
        }
    }
}

#[test]
fn late_stage_proposals_mostly_accepted() {
    use dynflow::koopman::{koopman_accelerated_train, KoopmanSchedule};
    use dynflow::training::Phase;

    let sys = catalog_get("harmonic_oscillator").unwrap();
    let config = TrainConfig {
        max_iters: 9_000,
        loss_target: 0.0,
        ..TrainConfig::default()
    };
    let schedule = KoopmanSchedule {
        max_proposals: 10,
        ..KoopmanSchedule::default()
    };
    let net = MlpParams::for_system(32, 2, 1).unwrap();
    let out = koopman_accelerated_train(net, &schedule, &config, &[1.0, 0.0], &sys, None).unwrap();
    assert_eq!(out.proposals.len(), 10);
    let rate = out.acceptance_rate().unwrap();
    println!("late-stage acceptance rate {rate}");
    assert!(rate >= 0.5);
    let koopman_rows = out.history.iter().filter(|r| r.phase == Phase::Koopman).count();
    assert_eq!(koopman_rows, 10);
    for r in &out.proposals {
        assert!(!r.accepted || r.loss_after <= 1.05 * r.loss_before);
    }
}

#[test]
fn rejected_proposals_restore_weights_exactly() {
    use dynflow::koopman::{koopman_train, GuardConfig};

    let sys = catalog_get("harmonic_oscillator").unwrap();
    let net = MlpParams::for_system(4, 2, 3).unwrap();
    let n = net.num_params();
    // An expanding synthetic flow through weight space: proposals overshoot.
    let cols: Vec<Vec<f64>> = (0..6)
        .map(|t| {
            net.flatten()
                .iter()
                .enumerate()
                .map(|(i, w)| w + 1.5f64.powi(t) * (i as f64 + 1.0) / n as f64)
                .collect()
        })
        .collect();
    let start = MlpParams::from_flat(&net, &cols[0]).unwrap();
    let model = fit(&snapshots(cols), Rank::Auto, None).unwrap();
    let guard = GuardConfig {
        gamma: 0.0,
        ..GuardConfig::default()
    };
    let mut params = start.clone();
    let report = koopman_train(&mut params, &model, 30, &guard, &[1.0, 0.0], std::f64::consts::PI, &sys).unwrap();
    assert!(!report.accepted);
    let bits = |p: &MlpParams| p.flatten().iter().map(|w| w.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&params), bits(&start));

    let report = koopman_train(&mut params, &model, 0, &guard, &[1.0, 0.0], std::f64::consts::PI, &sys).unwrap();
    assert!(report.accepted);
    assert_eq!(bits(&params), bits(&start));
    assert_eq!(report.loss_before, report.loss_after);

    let wrong = fit(&snapshots(vec![vec![1.0, 2.0]; 4]), Rank::Auto, None).unwrap();
    assert!(koopman_train(&mut params, &wrong, 1, &guard, &[1.0, 0.0], 1.0, &sys).is_err());
}
