use asgd::harness::*;
use asgd::report::*;
use asgd::sim::Strategy;
use asgd::theory::BoundVariant;

#[test]
fn simulator_reports_are_reproducible() {
    let setup = bounded_delay_setup(1, 100, 42).unwrap();
    let a = run_failure_prob_experiment(&setup).unwrap().without_timings();
    let b = run_failure_prob_experiment(&setup).unwrap().without_timings();
    assert_eq!(a, b);
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.trials.len(), 100);
    assert!(a.passed(), "{:?}", a.verdicts);
}

#[test]
fn noiseless_problem_never_fails() {
    let mut setup = sequential_setup(2, 100, 3).unwrap();
    setup.spec = asgd::problems::quadratic_problem(2, 0.0).unwrap();
    let report = run_failure_prob_experiment(&setup).unwrap();
    assert_eq!(report.aggregates["failures"], 0.0);
    assert_eq!(report.aggregates["wilson_lower"], 0.0);
}

#[test]
fn infeasible_step_size_is_refused() {
    let mut setup = bounded_delay_setup(4, 100, 1).unwrap();
    setup.params.alpha *= 50.0;
    setup.run.alpha = setup.params.alpha;
    assert!(matches!(run_failure_prob_experiment(&setup), Err(HarnessError::Theory(_))));
    setup.variant = BoundVariant::LockFreeGeneric;
    assert!(matches!(run_failure_prob_experiment(&setup), Err(HarnessError::Theory(_))));
}

#[test]
fn too_few_trials_is_refused() {
    let setup = sequential_setup(1, 99, 1).unwrap();
    assert!(matches!(run_failure_prob_experiment(&setup), Err(HarnessError::TooFewTrials { got: 99, .. })));
}

#[test]
fn report_formats_round_trip() {
    let setup = sequential_setup(1, 100, 9).unwrap();
    let report = run_failure_prob_experiment(&setup).unwrap();
    let back = ExperimentReport::from_json(&report.to_json()).unwrap();
    assert_eq!(back, report);
    let tables = parse_markdown_tables(&report.to_markdown());
    for (k, v) in &report.aggregates {
        let parsed = tables.values().find_map(|t| t.get(k)).copied().unwrap();
        assert!((parsed - v).abs() <= 1e-12 * v.abs().max(1.0), "{k}: {parsed} vs {v}");
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().next().unwrap(), TRIAL_CSV_HEADER.join(","));
    assert_eq!(csv.lines().count(), 101);
}

#[test]
fn emit_writes_requested_formats() {
    let dir = tempfile::tempdir().unwrap();
    let setup = sequential_setup(1, 100, 2).unwrap();
    let report = run_failure_prob_experiment(&setup).unwrap();
    let paths = report.emit(dir.path(), &ReportFormat::ALL).unwrap();
    assert_eq!(paths.len(), 3);
    for p in &paths {
        assert!(std::fs::metadata(p).unwrap().len() > 0);
    }
}

#[test]
fn threads_backend_runs() {
    let mut setup = bounded_delay_setup(1, 100, 5).unwrap();
    setup.backend = Backend::Threads;
    setup.run.iterations = setup.run.iterations.min(2000);
    let report = run_failure_prob_experiment(&setup).unwrap();
    assert_eq!(report.trials.len(), 100);
}

#[test]
fn sequential_sweep_has_no_contention() {
    let report = run_invariant_sweep(&sequential_sweep()).unwrap();
    assert!(report.passed());
    assert!(report.trials.iter().all(|t| t.tau_max == 0));
}

#[test]
fn small_sweep_passes() {
    let configs: Vec<SweepConfig> = [Strategy::RoundRobin, Strategy::BoundedDelay { tau_max: 4, seed: 0 }]
        .into_iter()
        .map(|strategy| SweepConfig {
            threads: 3,
            strategy,
            seeds: vec![1, 2, 3],
            iterations: 256,
            dim: 2,
            sigma: 0.5,
            alpha: 0.05,
        })
        .collect();
    let report = run_invariant_sweep(&configs).unwrap();
    assert!(report.passed(), "{:?}", report.verdicts.iter().filter(|v| !v.passed).collect::<Vec<_>>());
}

#[test]
fn slowdown_report_is_deterministic() {
    let a = run_slowdown_experiment(0.5, &[2, 4], 1).unwrap().without_timings();
    let b = run_slowdown_experiment(0.5, &[2, 4], 1).unwrap().without_timings();
    assert_eq!(a, b);
    let row = slowdown_row(0.5, 2, SLOWDOWN_TARGET).unwrap();
    assert!(row.max_contraction_error <= 1e-9);
    assert!((row.expected_round_contraction - 0.25).abs() < 1e-12);
}

#[test]
fn wilson_interval_matches_closed_form() {
    for (k, n) in [(3u64, 100u64), (10, 1000), (99, 100)] {
        let (lo, hi) = wilson_interval(k, n, Z95);
        let p = k as f64 / n as f64;
        let z2 = Z95 * Z95;
        let centre = (p + z2 / (2.0 * n as f64)) / (1.0 + z2 / n as f64);
        let half = Z95 / (1.0 + z2 / n as f64) * (p * (1.0 - p) / n as f64 + z2 / (4.0 * (n * n) as f64)).sqrt();
        assert!((lo - (centre - half)).abs() < 1e-12 && (hi - (centre + half)).abs() < 1e-12);
    }
    assert_eq!(wilson_interval(100, 100, Z95).1, 1.0);
}
