use dynflow::net::MlpParams;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn initial_condition_holds_for_any_params(seed in any::<u64>(), q in -10.0f64..10.0, p in -10.0f64..10.0) {
        let net = MlpParams::for_system(8, 2, seed).unwrap();
        prop_assert_eq!(net.forward(0.0, &[q, p]).z_hat, vec![q, p]);
    }

    #[test]
    fn dual_derivative_matches_finite_difference(seed in any::<u64>(), t in 0.05f64..3.0) {
        let net = MlpParams::for_system(16, 2, seed).unwrap();
        let z0 = [1.0, 0.0];
        let h = 1e-5;
        let d = net.forward(t, &z0).z_hat_dot;
        let zp = net.predict(t + h, &z0);
        let zm = net.predict(t - h, &z0);
        for i in 0..2 {
            let fd = (zp[i] - zm[i]) / (2.0 * h);
            let rel = (fd - d[i]).abs() / d[i].abs().max(fd.abs()).max(1e-6);
            prop_assert!(rel <= 1e-6, "rel {}", rel);
        }
    }
}

/// Second differences of ẑ converge at O(h²): quartering the error when h halves.
#[test]
fn second_difference_converges_quadratically() {
    let net = MlpParams::for_system(32, 2, 17).unwrap();
    let z0 = [1.0, 0.0];
    let t = 0.8;
    let second = |h: f64| {
        let zp = net.predict(t + h, &z0)[0];
        let z = net.predict(t, &z0)[0];
        let zm = net.predict(t - h, &z0)[0];
        (zp - 2.0 * z + zm) / (h * h)
    };
    let reference = second(1e-4);
    let e1 = (second(0.02) - reference).abs();
    let e2 = (second(0.01) - reference).abs();
    let ratio = e1 / e2;
    assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");
}
