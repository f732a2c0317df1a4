use optexec::dp_oracle::*;
use optexec::{integrate_value_ode, Error, MarketParams, SolverOptions};

fn params(lam: f64) -> MarketParams {
    MarketParams::new(-0.25, 0.5, lam, 1.0, 1.0).unwrap()
}

fn cfg(horizon: f64, nx: usize) -> HjbConfig {
    HjbConfig { horizon, nx, ..Default::default() }
}

#[test]
fn grid_invariants_hold() {
    let g = march_hjb(&params(1.0), &cfg(10.0, 120)).unwrap();
    assert!(g.u.last().unwrap().iter().all(|&v| v == 0.0));
    for s in &g.u {
        assert_eq!(s[0], 0.0);
        for (x, u) in g.x.iter().zip(s) {
            assert!(*u >= 0.0 && *u <= x * (1.0 + 1e-12));
        }
        assert!(s.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }
    // Non-increasing in t.
    for w in g.u.windows(2) {
        assert!(w[0].iter().zip(&w[1]).all(|(a, b)| a >= &(b - 1e-12)));
    }
    assert!(g.meta.cfl_ratio <= 1.0);
}

#[test]
fn more_time_never_lowers_value() {
    let a = march_hjb(&params(1.0), &cfg(20.0, 150)).unwrap();
    let b = march_hjb(&params(1.0), &cfg(40.0, 150)).unwrap();
    for (u20, u40) in a.initial().iter().zip(b.initial()) {
        assert!(*u20 <= u40 + 1e-10);
    }
}

#[test]
fn cheaper_impact_raises_value() {
    let a = march_hjb(&params(1.0), &cfg(10.0, 120)).unwrap();
    let b = march_hjb(&params(0.5), &cfg(10.0, 120)).unwrap();
    for (hi, lo) in a.initial().iter().zip(b.initial()).skip(1) {
        assert!(lo >= hi);
    }
}

#[test]
fn refining_the_grid_reduces_the_error() {
    let p = params(1.0);
    let vf = integrate_value_ode(&p, &SolverOptions::default()).unwrap();
    let errs: Vec<f64> = [100, 200]
        .iter()
        .map(|&nx| march_hjb(&p, &cfg(40.0, nx)).unwrap().deviation(|x| vf.g_at(x), 0.1, 5.0).max_abs)
        .collect();
    assert!(errs[1] < errs[0], "{errs:?}");
}

#[test]
fn stationary_residual_shrinks_with_horizon() {
    let p = params(1.0);
    let resid = |t: f64| {
        let g = march_hjb(&p, &cfg(t, 150)).unwrap();
        let (x, u) = (&g.x, g.initial());
        let s2 = p.sigma * p.sigma;
        let mut worst = 0.0f64;
        for i in 1..x.len() - 1 {
            if x[i] < 0.1 || x[i] > 5.0 {
                continue;
            }
            let (hl, hr) = (x[i] - x[i - 1], x[i + 1] - x[i]);
            let pb = (u[i] - u[i - 1]) / hl;
            let pf = (u[i + 1] - u[i]) / hr;
            let ux = (hl * pf + hr * pb) / (hl + hr);
            let uxx = 2.0 * (pf - pb) / (hl + hr);
            let r = 0.5 * s2 * x[i] * x[i] * uxx - (p.mu + s2) * x[i] * ux
                + (2.0 * p.mu + s2) * u[i]
                + (1.0 - ux).max(0.0).powi(2) / (2.0 * p.lambda_impact);
            worst = worst.max(r.abs());
        }
        worst
    };
    assert!(resid(40.0) < 0.1 * resid(5.0));
}

#[test]
fn policy_from_grid_limits() {
    let g = march_hjb(&params(2.0), &cfg(40.0, 200)).unwrap();
    assert!(policy_from_grid(&g, 0.0, 1e-6).unwrap().abs() < 0.05);
    let far = policy_from_grid(&g, 0.0, 24.0).unwrap();
    assert!((far + 0.5).abs() < 0.01, "{far}");
    for x in [0.0, 0.3, 3.0, 25.0] {
        for t in [0.0, 17.0, 40.0] {
            assert!(policy_from_grid(&g, t, x).unwrap() <= 0.0);
        }
    }
    // Nothing left to gain at the horizon.
    assert_eq!(g.policy(40.0, 3.0).unwrap(), -0.5);
    assert!(g.policy(0.0, 30.0).is_err());
    assert!(g.value(41.0, 1.0).is_err());
}

#[test]
fn unstable_step_count_is_refused() {
    match march_hjb(&params(1.0), &HjbConfig { nt: Some(10), ..cfg(1.0, 50) }) {
        Err(Error::Cfl { nt, required }) => assert!(nt < required),
        other => panic!("{other:?}"),
    }
}

#[test]
fn csv_export() {
    let g = march_hjb(&params(1.0), &HjbConfig { snapshots: 2, ..cfg(1.0, 20) }).unwrap();
    let csv = g.to_csv();
    assert!(csv.starts_with("t,x,u\n"));
    assert_eq!(csv.lines().count(), 1 + g.times.len() * g.x.len());
    assert!((g.tail_certificate() - (-0.25f64).exp()).abs() < 1e-15);
}
