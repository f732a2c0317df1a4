use optexec::closed_form::{g_critical, g_prime_critical, CriticalParams};
use optexec::value_ode::*;
use optexec::{Error, MarketParams};

fn params(mu: f64, sigma: f64, lam: f64) -> MarketParams {
    MarketParams::new(mu, sigma, lam, 1.0, 1.0).unwrap()
}

fn solve(p: &MarketParams) -> ValueFunction {
    integrate_value_ode(p, &SolverOptions::default()).unwrap()
}

#[test]
fn series_start_matches_closed_form() {
    let p = params(-0.125, 0.5, 1.0);
    let cp = CriticalParams::from_market(&p).unwrap();
    let x0 = 1e-4;
    let (_, gp) = series_init(&p, x0).unwrap();
    assert!((gp - g_prime_critical(x0, &cp)).abs() < 1e-6);
}

#[test]
fn series_cutoff_too_large_is_refused() {
    let p = params(-0.125, 0.5, 1.0);
    assert!(matches!(series_init(&p, 0.5), Err(Error::CutoffTooLarge { .. })));
}

#[test]
fn refuses_nonnegative_drift() {
    for mu in [0.0, 0.1] {
        let p = params(mu, 0.5, 1.0);
        assert!(matches!(integrate_value_ode(&p, &SolverOptions::default()), Err(Error::Regime(_))));
    }
}

#[test]
fn boundary_values_and_bounds() {
    for p in [params(-0.125, 0.5, 1.0), params(-0.3, 0.2, 1.0), params(-1.0, 0.1, 5.0), params(-0.01, 0.3, 0.5)] {
        let vf = solve(&p);
        assert_eq!(vf.g()[0], 0.0);
        assert_eq!(vf.g_prime()[0], 1.0);
        let r = vf.validate();
        assert!(r.passed(1e-10), "{p:?} {r:?}");
        // 0 <= g <= x and g <= −1/(2Λ(2μ+σ²)) when that bound is positive.
        let k = 2.0 * p.mu + p.sigma * p.sigma;
        for (x, g) in vf.x_grid().iter().zip(vf.g()) {
            assert!(*g >= 0.0 && *g <= *x * (1.0 + 1e-12));
            if k < 0.0 {
                assert!(*g <= -1.0 / (2.0 * p.lambda_impact * k) * (1.0 + 1e-9));
            }
        }
    }
}

#[test]
fn critical_case_matches_closed_form() {
    let p = params(-0.125, 0.5, 1.0);
    let cp = CriticalParams::from_market(&p).unwrap();
    let vf = solve(&p);
    for x in [0.01, 0.1, 0.5, 1.0, 3.0, 10.0] {
        assert!((vf.g_at(x) - g_critical(x, &cp)).abs() < 1e-10, "{x}");
        assert!((vf.g_prime_at(x) - g_prime_critical(x, &cp)).abs() < 1e-9, "{x}");
    }
    // 1 − g'(1) = h at y = 1.
    let h1 = optexec::h_ratio(1.0, &cp).unwrap();
    assert!((vf.g_prime_at(1.0) - (1.0 - h1)).abs() < 1e-5);
}

#[test]
fn g_prime_at_is_monotone_and_bounded() {
    let vf = solve(&params(-0.3, 0.2, 1.0));
    let mut prev = 1.0;
    for i in 0..=20000 {
        let x = 1e-9 * (6e10f64).powf(i as f64 / 20000.0);
        let v = vf.g_prime_at(x);
        assert!((0.0..=1.0).contains(&v));
        assert!(v <= prev, "x={x} {v} > {prev}");
        prev = v;
    }
    assert_eq!(vf.g_prime_at(0.0), 1.0);
}

#[test]
fn json_round_trip_is_bit_exact() {
    let vf = solve(&params(-0.25, 0.5, 1.0));
    let back = ValueFunction::from_json(&vf.to_json().unwrap()).unwrap();
    assert_eq!(back.x_grid(), vf.x_grid());
    assert_eq!(back.g(), vf.g());
    assert_eq!(back.g_prime(), vf.g_prime());
    assert_eq!(back.residual_sup().to_bits(), vf.residual_sup().to_bits());
    assert_eq!(back.g_at(0.7).to_bits(), vf.g_at(0.7).to_bits());
    assert_eq!(back.to_json().unwrap(), vf.to_json().unwrap());
}

#[test]
fn csv_has_full_precision() {
    let vf = solve(&params(-0.25, 0.5, 1.0));
    let csv = vf.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x,g,g_prime"));
    for (i, line) in lines.enumerate() {
        let f: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(f[0].to_bits(), vf.x_grid()[i].to_bits());
        assert_eq!(f[1].to_bits(), vf.g()[i].to_bits());
        assert_eq!(f[2].to_bits(), vf.g_prime()[i].to_bits());
    }
}

#[test]
fn corrupted_grid_fails_validation() {
    let vf = solve(&params(-0.25, 0.5, 1.0));
    let mut g = vf.g().to_vec();
    let i = g.len() / 2;
    g[i] += 1e-3;
    let bad = vf.with_values(g, vf.g_prime().to_vec()).unwrap();
    let r = bad.validate();
    assert!(!r.passed(1e-10));
    assert!(!r.monotone || !r.concave || r.residual_sup > 1e-6);
}

#[test]
fn identity_has_residual_mu_times_x() {
    // g = x gives LHS = μx exactly.
    let p = params(-0.25, 0.5, 1.0);
    let vf = solve(&p);
    let id = vf.with_values(vf.x_grid().to_vec(), vec![1.0; vf.x_grid().len()]).unwrap();
    let r = id.validate();
    let expect = p.mu.abs() * vf.x_max();
    assert!((r.raw_residual_sup - expect).abs() < 1e-9 * expect, "{} {expect}", r.raw_residual_sup);
}

#[test]
fn solve_is_deterministic_and_scale_free() {
    let p = params(-0.2, 0.4, 2.0);
    let a = solve(&p);
    let b = solve(&p.with_position(4.0, 2.0).unwrap());
    assert_eq!(a.g(), b.g());
    assert_eq!(b.value_of(2.0, 4.0), 16.0 * a.value_of(0.5, 1.0));
}

#[test]
fn value_increases_as_impact_falls() {
    let x = [0.1, 1.0, 5.0];
    let hi = solve(&params(-0.2, 0.4, 2.0));
    let lo = solve(&params(-0.2, 0.4, 1.0));
    for x in x {
        assert!(lo.g_at(x) > hi.g_at(x));
    }
}

#[test]
fn tolerance_refinement_converges() {
    let p = params(-0.3, 0.2, 1.0);
    let coarse = integrate_value_ode(&p, &SolverOptions { tol: 1e-7, ..Default::default() }).unwrap();
    let fine = solve(&p);
    for x in [0.01, 1.0, 10.0] {
        assert!((coarse.g_at(x) - fine.g_at(x)).abs() < 1e-6);
    }
}
