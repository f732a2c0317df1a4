use optexec::closed_form::CriticalParams;
use optexec::monte_carlo::*;
use optexec::strategy::{Feedback, Policy};
use optexec::{Error, MarketParams, SolverOptions};

fn critical() -> (MarketParams, Feedback) {
    let cp = CriticalParams::new(0.5, 1.0).unwrap();
    (cp.market(1.0, 1.0).unwrap(), Feedback::critical(cp).unwrap())
}

fn small(n: usize) -> McConfig {
    McConfig { n_paths: n, steps: 128, ..Default::default() }
}

#[test]
fn identical_inputs_give_identical_bits() {
    let (p, fb) = critical();
    let policy = Policy::OptimalFeedback(fb);
    let a = estimate_value(&p, &policy, &small(2000)).unwrap();
    let b = estimate_value(&p, &policy, &small(2000)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let c = estimate_value(&p, &policy, &McConfig { seed: 1, ..small(2000) }).unwrap();
    assert_ne!(a.mean, c.mean);
}

#[test]
fn thread_count_does_not_change_results() {
    let (p, fb) = critical();
    let policy = Policy::OptimalFeedback(fb);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| estimate_value(&p, &policy, &small(3000)).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn duplicate_policy_has_zero_difference() {
    let (p, fb) = critical();
    let policies = [Policy::OptimalFeedback(fb.clone()), Policy::OptimalFeedback(fb)];
    let t = compare_policies(&p, &policies, &small(1000)).unwrap();
    assert_eq!(t.rows[1].diff, 0.0);
    assert_eq!(t.rows[1].se_diff, 0.0);
    assert_eq!(t.rows[0].policy, "optimal");
    assert!(t.to_csv().lines().nth(1).unwrap().starts_with("optimal,"));
}

#[test]
fn fire_sale_loses_to_optimal() {
    let p = MarketParams::new(-0.125, 0.5, 5.0, 1.0, 1.0).unwrap();
    let fb = Feedback::for_params(&p, &SolverOptions::default()).unwrap();
    let policies = [Policy::OptimalFeedback(fb), Policy::ConstantRate { horizon: 0.01 }];
    let t = compare_policies(&p, &policies, &small(4000)).unwrap();
    assert!(-t.rows[1].diff > 2.0 * t.rows[1].se_diff, "{t:?}");
}

#[test]
fn revenue_never_exceeds_position_value() {
    let (p, fb) = critical();
    for policy in
        [Policy::OptimalFeedback(fb), Policy::ExponentialRate { c: 0.3 }, Policy::ConstantRate { horizon: 5.0 }]
    {
        let e = estimate_value(&p, &policy, &McConfig { horizon: Some(60.0), ..small(4000) }).unwrap();
        assert!(e.revenue.mean <= p.phi0 * p.s0 + 2.0 * e.revenue.se, "{e:?}");
        assert!(e.mean < e.revenue.mean);
    }
}

#[test]
fn longer_horizon_moves_estimate_by_at_most_the_tail() {
    let (p, fb) = critical();
    let policy = Policy::OptimalFeedback(fb);
    let t = 30.0;
    let a = estimate_value(&p, &policy, &McConfig { horizon: Some(t), ..small(4000) }).unwrap();
    let b = estimate_value(&p, &policy, &McConfig { horizon: Some(t + 20.0), ..small(4000) }).unwrap();
    assert!((b.mean - a.mean).abs() <= a.tail_bound + 2.0 * a.se.max(b.se), "{a:?} {b:?}");
    assert!((a.tail_bound - (p.mu * t).exp()).abs() < 1e-15);
}

#[test]
fn default_horizon_follows_tail_rule() {
    let (p, fb) = critical();
    let v = fb.value_of(1.0, 1.0);
    let t = default_horizon(&p, v, 1e-3).unwrap();
    assert!((tail_bound(&p, t) - 1e-3 * v).abs() < 1e-15);
    let zero = p.with_position(1.0, 1.0).map(|q| MarketParams { mu: 0.0, ..q }).unwrap();
    assert!(matches!(default_horizon(&zero, v, 1e-3), Err(Error::Config(_))));
    assert!(estimate_value(&zero, &Policy::ExponentialRate { c: 1.0 }, &small(100)).is_err());
}

#[test]
fn positive_drift_carries_warning_and_null_tail() {
    let p = MarketParams::new(0.1, 0.2, 1.0, 1.0, 1.0).unwrap();
    let e = estimate_value(&p, &Policy::ExponentialRate { c: 0.1 }, &McConfig { horizon: Some(5.0), ..small(200) })
        .unwrap();
    assert!(e.divergence_warning);
    assert!(e.tail_bound.is_infinite());
    let json: serde_json::Value = serde_json::from_str(&e.to_json().unwrap()).unwrap();
    assert!(json["tail_bound"].is_null());
    for key in ["params", "policy", "mean", "se", "ci95", "n_paths", "T", "seed"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let back: McEstimate = serde_json::from_str(&e.to_json().unwrap()).unwrap();
    assert_eq!(back, e);
}

#[test]
fn supermartingale_report_shape() {
    let (p, fb) = critical();
    let r = supermartingale_check(&p, &fb, &small(2000)).unwrap();
    assert_eq!(r.mean_m.len(), 129);
    assert_eq!(r.mean_m[0], r.m0);
    assert_eq!(r.se_m[0], 0.0);
    assert_eq!(r.target, p.phi0 * r.m0);
}

#[test]
fn bad_configs_are_rejected() {
    let (p, fb) = critical();
    let policy = Policy::OptimalFeedback(fb.clone());
    assert!(estimate_value(&p, &policy, &McConfig { n_paths: 3, ..small(3) }).is_err());
    assert!(estimate_value(&p, &policy, &McConfig { steps: 0, ..small(10) }).is_err());
    assert!(compare_policies(&p, &[policy], &small(10)).is_err());
    let other = MarketParams::new(-0.3, 0.5, 1.0, 1.0, 1.0).unwrap();
    assert!(matches!(estimate_value(&other, &Policy::OptimalFeedback(fb), &small(10)), Err(Error::Config(_))));
}

#[test]
fn graded_grid_concentrates_early_steps() {
    let (p, _) = critical();
    let g = GridKind::Graded.build(&p, 50.0, 100);
    assert_eq!(g[0], 0.0);
    assert_eq!(g[100], 50.0);
    assert!(g[1] - g[0] < g[100] - g[99]);
    let u = GridKind::Uniform.build(&p, 50.0, 100);
    assert!((u[1] - 0.5).abs() < 1e-15);
}
