use asgd::problems::quadratic_problem;
use asgd::theory::*;
use proptest::prelude::*;

fn base() -> BoundParams {
    BoundParams {
        c: 1.0,
        l: 1.0,
        m: 1.0,
        d: 1,
        n: 4,
        tau_max: 16,
        epsilon: 0.01,
        theta: 1.0,
        alpha: 0.0,
        x0_dist_sq: 1.0,
        horizon: 100_000,
    }
}

fn tuned() -> BoundParams {
    let p = base();
    let a = tuned_learning_rate(&p);
    p.with_alpha(a)
}

// Oracle: the step size for the unit example is 0.01/(1 + 0.4·8).
#[test]
fn tuned_rate_oracle() {
    let expected = 0.01 / (1.0 + 4.0 * 0.1 * 8.0);
    assert!((tuned_learning_rate(&base()) - expected).abs() < 1e-15);
    assert!((expected - 0.002380952380952381).abs() < 1e-15);
}

// Oracle: plog(100e) = ln(100e²) = 2 + ln 100 and the leading factor is 4.2/1000.
#[test]
fn lock_free_bound_oracle() {
    let b = failure_prob_bound(&tuned(), BoundVariant::LockFreeTuned).unwrap();
    let oracle = 0.0042 * (2.0 + (100.0f64).ln());
    assert!((b.raw - oracle).abs() < 1e-12, "{} vs {oracle}", b.raw);
    assert!((b.raw - 0.0277419).abs() < 1e-6);
}

#[test]
fn all_variants_oracle() {
    let p = tuned();
    let log_term = 2.0 + 100f64.ln();
    let seq = failure_prob_bound(&p, BoundVariant::Sequential).unwrap().raw;
    assert!((seq - 1.0 / (0.01 * 1e5) * log_term).abs() < 1e-12);
    let cr = failure_prob_bound(&p, BoundVariant::ConsistentRead).unwrap().raw;
    assert!((cr - (1.0 + 2.0 * 16.0 * 0.1) / (0.01 * 1e5) * log_term).abs() < 1e-12);
    // Generic: W_0 / ((1 − α²HLMC√d) T) with every factor spelled out.
    let a = p.alpha;
    let den = 2.0 * a * 0.01 - a * a;
    let w0 = 0.01 / den * (1.0 + 100f64.ln());
    let h = 2.0 * 0.1 / den;
    let value = a * a * h * 2.0 * 8.0;
    let generic = failure_prob_bound(&p, BoundVariant::LockFreeGeneric).unwrap().raw;
    assert!((generic - w0 / ((1.0 - value) * 1e5)).abs() < 1e-12);
}

#[test]
fn w_and_h_oracle() {
    let p = base().with_alpha(0.005);
    assert!((rate_supermartingale_w(&p, 0.01, 0).unwrap() - 133.33333333333334).abs() < 1e-9);
    assert!((lipschitz_h(&p).unwrap() - 2666.6666666666665).abs() < 1e-9);
    assert!((rate_supermartingale_w(&p, 0.01, 7).unwrap() - (0.01 / 7.5e-5 + 7.0)).abs() < 1e-9);
}

#[test]
fn sequential_bound_matches_lock_free_without_contention() {
    let p = BoundParams { tau_max: 0, ..base() };
    let p = p.clone().with_alpha(tuned_learning_rate(&p));
    let a = failure_prob_bound(&p, BoundVariant::LockFreeTuned).unwrap().raw;
    let s = failure_prob_bound(&p, BoundVariant::Sequential).unwrap().raw;
    assert_eq!(a, s);
    assert_eq!(feasibility_check(&p).unwrap().value, 0.0);
}

#[test]
fn feasibility_crossing_by_bisection() {
    let p = tuned();
    assert!(feasibility_check(&p).unwrap().feasible);
    // The value is increasing in α on the valid range; bisect for value = 1.
    let value = |a: f64| feasibility_check(&p.clone().with_alpha(a)).map(|f| f.value);
    let (mut lo, mut hi) = (p.alpha, p.alpha);
    while value(hi).map(|v| v < 1.0).unwrap_or(false) {
        hi *= 1.5;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        match value(mid) {
            Ok(v) if v < 1.0 => lo = mid,
            _ => hi = mid,
        }
    }
    assert!(feasibility_check(&p.clone().with_alpha(lo)).unwrap().feasible);
    let above = p.clone().with_alpha(hi * 1.0001);
    let gated = feasibility_check(&above).map(|f| f.feasible).unwrap_or(false);
    assert!(!gated);
    assert!(failure_prob_bound(&above, BoundVariant::LockFreeTuned).is_err());
    assert!(failure_prob_bound(&above, BoundVariant::LockFreeGeneric).is_err());
}

#[test]
fn tuned_feasibility_closed_form() {
    // At the tuned rate the value simplifies to ϑ(D − M²)/(2D − ϑM²),
    // D = M² + 4√ε·L·M·√(τn)·√d.
    for (theta, tau, n, d) in [(1.0, 16u64, 4usize, 1usize), (0.5, 8, 2, 3), (0.9, 100, 8, 4)] {
        let p = BoundParams { theta, tau_max: tau, n, d, m: 3.0, l: 2.0, c: 0.5, ..base() };
        let p = p.clone().with_alpha(tuned_learning_rate(&p));
        let dd = 9.0 + 4.0 * 0.1 * 2.0 * 3.0 * ((tau * n as u64) as f64).sqrt() * (d as f64).sqrt();
        let closed = theta * (dd - 9.0) / (2.0 * dd - theta * 9.0);
        let v = feasibility_check(&p).unwrap().value;
        assert!((v - closed).abs() < 1e-12, "{v} vs {closed}");
    }
}

#[test]
fn slowdown_oracles() {
    let f = lower_bound_slowdown(0.5, 2).unwrap();
    assert!((f - 2.0 * (-0.6931471805599453) / (-1.3862943611198906)).abs() < 1e-12);
    let f29 = lower_bound_slowdown(0.1, 29).unwrap();
    assert!((f29 - 29.0 * 0.9f64.ln() / (0.1f64.ln() - 2f64.ln())).abs() < 1e-12);
    assert!((f29 - 1.0199359205260752).abs() < 1e-9);
    // Enumeration oracle for the threshold.
    for alpha in [0.05, 0.1, 0.3, 0.5, 0.9] {
        let oracle = (1u64..).find(|&t| 2.0 * (1.0f64 - alpha).powi(t as i32) <= alpha).unwrap();
        assert_eq!(minimal_adversary_tau(alpha).unwrap(), oracle);
    }
}

#[test]
fn stale_variance_oracle() {
    // Direct geometric sum.
    for (alpha, sigma, tau) in [(0.5, 1.0, 2u64), (0.1, 0.3, 29), (0.7, 2.0, 5)] {
        let sum: f64 = (0..tau).map(|k| (1.0f64 - alpha).powi(2 * k as i32)).sum();
        let oracle = alpha * alpha * sigma * sigma * (1.0 + sum);
        assert!((stale_variance_closed_form(alpha, sigma, tau).unwrap() - oracle).abs() < 1e-12);
    }
    assert!((stale_variance_closed_form(0.5, 1.0, 2).unwrap() - 0.5625).abs() < 1e-12);
}

#[test]
fn supermartingale_freeze_and_deterministic_decrease() {
    let spec = quadratic_problem(2, 0.0).unwrap();
    let mut p = BoundParams::for_problem(&spec, 1, 0, 0.01, 1.0, 1.0, 100);
    p.alpha = sequential_learning_rate(&p);
    let states = vec![vec![0.0, 0.0], vec![0.05, 0.0], vec![3.0, -1.0]];
    let v = check_supermartingale(&spec, &p, &states, 10, 1).unwrap();
    assert!(v.passed, "{}", v.summary());
    // Deterministic step strictly lowers W outside the region.
    let x = [3.0, -1.0];
    let w0 = rate_supermartingale_w(&p, 10.0, 0).unwrap();
    let next: Vec<f64> = x.iter().map(|v| v * (1.0 - p.alpha)).collect();
    let w1 = rate_supermartingale_w(&p, next.iter().map(|v| v * v).sum(), 1).unwrap();
    assert!(w1 < w0);
}

proptest! {
    #[test]
    fn plog_properties(x in 0.0f64..1e6, y in 0.0f64..1e6) {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        prop_assert!(plog(a) <= plog(b));
        if x >= 1.0 {
            prop_assert!(plog(x) <= x);
        } else {
            prop_assert_eq!(plog(x), x);
        }
    }

    #[test]
    fn w_minus_t_nonnegative_and_monotone(d1 in 0.0f64..50.0, d2 in 0.0f64..50.0, t in 0u64..1000) {
        let p = base().with_alpha(0.005);
        let (a, b) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let wa = rate_supermartingale_w(&p, a, t).unwrap() - t as f64;
        let wb = rate_supermartingale_w(&p, b, t).unwrap() - t as f64;
        prop_assert!(wa >= 0.0);
        prop_assert!(wa <= wb);
    }

    #[test]
    fn lock_free_dominates_sequential(tau in 1u64..200, n in 1usize..16, d in 1usize..8, dist in 0.0f64..10.0) {
        let p = BoundParams { tau_max: tau, n, d, x0_dist_sq: dist, ..base() };
        let p = p.clone().with_alpha(tuned_learning_rate(&p));
        let a = failure_prob_bound(&p, BoundVariant::LockFreeTuned).unwrap().raw;
        let s = failure_prob_bound(&p, BoundVariant::Sequential).unwrap().raw;
        prop_assert!(a >= s);
    }

    #[test]
    fn doubling_horizon_halves_bounds(t in 1u64..1_000_000) {
        let p = tuned().with_horizon(t);
        let q = tuned().with_horizon(2 * t);
        for v in BoundVariant::ALL {
            let a = failure_prob_bound(&p, v).unwrap().raw;
            let b = failure_prob_bound(&q, v).unwrap().raw;
            prop_assert!((a - 2.0 * b).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn slowdown_is_linear(alpha in 0.01f64..0.99, tau in 1u64..500) {
        let per = lower_bound_slowdown(alpha, 1).unwrap();
        let f = lower_bound_slowdown(alpha, tau).unwrap();
        prop_assert!((f / tau as f64 - per).abs() <= 1e-12 * per.abs());
        prop_assert!(lower_bound_slowdown(alpha, tau + 1).unwrap() > f);
    }

    #[test]
    fn theta_scales_rates_linearly(theta in 0.01f64..1.0) {
        let p = BoundParams { theta, ..base() };
        let full = base();
        prop_assert!((tuned_learning_rate(&p) - theta * tuned_learning_rate(&full)).abs() < 1e-15);
        prop_assert!((sequential_learning_rate(&p) - theta * sequential_learning_rate(&full)).abs() < 1e-15);
    }
}

#[test]
fn errors() {
    assert!(matches!(
        failure_prob_bound(&tuned().with_horizon(0), BoundVariant::Sequential),
        Err(TheoryError::ZeroHorizon)
    ));
    assert!(stale_variance_closed_form(0.0, 1.0, 1).is_err());
    let bad = BoundParams { theta: 1.5, ..tuned() };
    assert!(failure_prob_bound(&bad, BoundVariant::Sequential).is_err());
}
