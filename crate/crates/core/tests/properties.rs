use optexec::closed_form::{h_of_q, CriticalParams};
use optexec::market::{gbm_path_from_normals, uniform_grid};
use optexec::rng::StreamId;
use optexec::strategy::{simulate_execution, Feedback, Policy};
use optexec::{integrate_value_ode, MarketParams, SolverOptions};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solved_g_is_concave_increasing_and_bounded(mu in -0.8f64..-0.02, sigma in 0.1f64..0.8, lam in 0.2f64..4.0) {
        let p = MarketParams::new(mu, sigma, lam, 1.0, 1.0).unwrap();
        let vf = integrate_value_ode(&p, &SolverOptions::default()).unwrap();
        let r = vf.validate();
        prop_assert!(r.monotone && r.concave && r.bounds_ok, "{:?}", r);
        prop_assert!(r.residual_sup <= 1e-8, "{}", r.residual_sup);
        let mut prev = 1.0;
        for i in 0..200 {
            let x = 1e-8 * 10f64.powf(i as f64 * 0.05);
            let gp = vf.g_prime_at(x);
            prop_assert!(gp <= prev && (0.0..=1.0).contains(&gp));
            prev = gp;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn h_is_in_unit_interval_and_decreasing(q in 1e-6f64..1e8, f in 1.0001f64..3.0) {
        let (a, b) = (h_of_q(q), h_of_q(q * f));
        prop_assert!(a > 0.0 && a < 1.0);
        prop_assert!(b <= a);
    }

    #[test]
    fn streams_are_reproducible(seed in any::<u64>(), index in any::<u64>()) {
        let mut a = [0.0; 8];
        let mut b = [0.0; 8];
        StreamId::new(seed, index).fill_normals(&mut a);
        StreamId::new(seed, index).fill_normals(&mut b);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn exponential_execution_scales_exactly(e in -3i32..4, seed in any::<u64>(), c in 0.05f64..3.0) {
        let k = 2f64.powi(e);
        let p = MarketParams::new(-0.1, 0.3, 1.0, 1.0, 0.7).unwrap();
        let q = p.with_position(k, 0.7 * k).unwrap();
        let grid = uniform_grid(10.0, 40);
        let mut z = vec![0.0; 40];
        StreamId::new(seed, 0).fill_normals(&mut z);
        let a = simulate_execution(&Policy::ExponentialRate { c }, &gbm_path_from_normals(&p, &grid, &z, 1.0).unwrap(), &p, 1).unwrap();
        let b = simulate_execution(&Policy::ExponentialRate { c }, &gbm_path_from_normals(&q, &grid, &z, 1.0).unwrap(), &q, 1).unwrap();
        prop_assert_eq!(b.v_realized, k * k * a.v_realized);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimal_execution_is_admissible(seed in any::<u64>(), phi0 in 0.01f64..20.0) {
        let cp = CriticalParams::new(0.5, 1.0).unwrap();
        let fb = Feedback::critical(cp).unwrap();
        let p = cp.market(1.0, phi0).unwrap();
        let grid = uniform_grid(30.0, 60);
        let mut z = vec![0.0; 60];
        StreamId::new(seed, 1).fill_normals(&mut z);
        let path = gbm_path_from_normals(&p, &grid, &z, 1.0).unwrap();
        let r = simulate_execution(&Policy::OptimalFeedback(fb), &path, &p, 1).unwrap();
        prop_assert!(r.rate.iter().all(|&v| v <= 0.0));
        prop_assert!(r.inventory.windows(2).all(|w| w[1] <= w[0] && w[1] >= 0.0));
        // Revenue is at most what the shares fetched at the best price on the path.
        let best = path.prices.iter().cloned().fold(0.0, f64::max);
        prop_assert!(*r.revenue_cum.last().unwrap() <= phi0 * best * (1.0 + 1e-12));
    }
}
