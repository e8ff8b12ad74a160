//! Experiment orchestration: Monte-Carlo failure probabilities, the
//! stale-gradient slowdown, schedule invariant sweeps, and epoch-based SGD.
//!
//! Trials are independent and run in parallel; aggregation happens after
//! the join, so simulator-backed reports are reproducible from their seeds.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{epoch_sgd, full_sgd, halving_epochs, EngineError, EpochConfig};
use crate::problems::{dist_sq, quadratic_problem, ProblemError, ProblemSpec};
use crate::report::{ExperimentReport, TrialRecord};
use crate::rng::{mix, trial_seeds};
use crate::shared_model::SharedModel;
use crate::sim::{simulate, SimError, SimOptions, Strategy};
use crate::theory::{
    failure_prob_bound, lower_bound_slowdown, minimal_adversary_tau, BoundParams, BoundVariant,
    TheoryError,
};
use crate::trace::{contention_fixture, ScheduleTrace};
use crate::verdict::Verdict;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("need at least {min} trials, got {got}")]
    TooFewTrials { got: usize, min: usize },
    #[error("refusing verdict: {0}")]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("{0}")]
    Invalid(String),
}

/// Wilson score interval for `successes` out of `n`.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if p == 1.0 { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Sample mean and standard error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Simulator,
    Threads,
}

/// Everything a failure-probability experiment needs.
#[derive(Debug, Clone)]
pub struct FailureProbSetup {
    pub spec: ProblemSpec,
    pub x0: Vec<f64>,
    /// `seed` is the base seed trial seeds derive from.
    pub run: EpochConfig,
    pub strategy: Strategy,
    pub params: BoundParams,
    pub variant: BoundVariant,
    pub trials: usize,
    pub backend: Backend,
}

pub const MIN_TRIALS: usize = 100;

fn check_trials(trials: usize) -> Result<(), HarnessError> {
    if trials < MIN_TRIALS {
        return Err(HarnessError::TooFewTrials {
            got: trials,
            min: MIN_TRIALS,
        });
    }
    Ok(())
}

/// Estimates `P(no iterate reaches the success region within T)` and
/// compares the upper 95% Wilson bound with the theoretical bound.
///
/// Infeasible parameters are refused for the variants that require
/// feasibility.
pub fn run_failure_prob_experiment(setup: &FailureProbSetup) -> Result<ExperimentReport, HarnessError> {
    check_trials(setup.trials)?;
    let started = Instant::now();
    let bound = failure_prob_bound(&setup.params, setup.variant)?;
    let seeds = trial_seeds(setup.run.seed, setup.trials);
    let outcomes: Vec<Result<TrialRecord, HarnessError>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| failure_trial(setup, i as u64, seed))
        .collect();
    let trials = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut report = ExperimentReport::new(format!("failure-prob-{}", setup.variant.name()));
    report.config = snapshot(&setup.run, &setup.params, &setup.strategy);
    report.config.insert("problem.d".into(), setup.spec.dim.to_string());
    if let Some(s) = setup.spec.sigma() {
        report.config.insert("problem.sigma".into(), s.to_string());
    }
    report.seeds = seeds;
    let failures = trials.iter().filter(|t| t.hit_time.is_none()).count() as u64;
    let n = trials.len() as u64;
    let (lo, hi) = wilson_interval(failures, n, Z95);
    let hits: Vec<f64> = trials.iter().filter_map(|t| t.hit_time).map(|h| h as f64).collect();
    let observed_tau_max = trials.iter().map(|t| t.tau_max).max().unwrap_or(0);
    report.aggregates.insert("failures".into(), failures as f64);
    report.aggregates.insert("failure_rate".into(), failures as f64 / n as f64);
    report.aggregates.insert("wilson_lower".into(), lo);
    report.aggregates.insert("wilson_upper".into(), hi);
    report.aggregates.insert("mean_hit_time".into(), mean_stderr(&hits).0);
    report.aggregates.insert("observed_tau_max".into(), observed_tau_max as f64);
    report.aggregates.insert(
        "mean_tau_avg".into(),
        trials.iter().map(|t| t.tau_avg).sum::<f64>() / n as f64,
    );
    report.bounds.insert("raw".into(), bound.raw);
    report.bounds.insert("clamped".into(), bound.clamped);
    report.bounds.insert("alpha".into(), setup.params.alpha);

    let mut verdict = Verdict::new(
        format!("failure probability vs {} bound", setup.variant.name()),
        format!(
            "one-sided: upper Wilson 95% bound on P(F_T) ≤ theoretical bound ({} trials{})",
            n,
            if bound.is_vacuous() { "; bound vacuous" } else { "" }
        ),
    );
    verdict.sample_size = n;
    verdict.violations = failures;
    if !(bound.is_vacuous() || hi <= bound.raw) {
        verdict.passed = false;
        verdict.counterexample = Some(format!(
            "{failures}/{n} failures, upper Wilson {hi} > bound {}",
            bound.raw
        ));
    }
    report.verdicts.push(verdict);
    if bound.is_vacuous() {
        report
            .warnings
            .push(format!("bound {} ≥ 1 is vacuous; verdict passes trivially", bound.raw));
    }
    if setup.variant != BoundVariant::Sequential {
        let mut cap = Verdict::new(
            "contention within τ_max",
            "every trial's maximum interval contention ≤ the τ_max the bound assumes",
        );
        if setup.backend == Backend::Simulator {
            for t in &trials {
                cap.record(t.tau_max <= setup.params.tau_max, || {
                    format!("trial {} (seed {}): τ_max = {}", t.trial, t.seed, t.tau_max)
                });
            }
        }
        if setup.backend == Backend::Threads && observed_tau_max > setup.params.tau_max {
            report.warnings.push(format!(
                "real-thread runs reached interval contention {observed_tau_max} > τ_max = {}",
                setup.params.tau_max
            ));
        }
        if cap.sample_size > 0 {
            report.verdicts.push(cap);
        }
    }
    report.trials = trials;
    report
        .timings
        .insert("total_seconds".into(), started.elapsed().as_secs_f64());
    Ok(report)
}

fn failure_trial(setup: &FailureProbSetup, trial: u64, seed: u64) -> Result<TrialRecord, HarnessError> {
    let cfg = EpochConfig {
        seed,
        ..setup.run.clone()
    };
    let (hit_time, final_dist_sq, tau_max, tau_avg) = match setup.backend {
        Backend::Simulator => {
            let strategy = setup.strategy.reseeded(mix(seed, 1));
            let out = simulate(&setup.spec, &setup.x0, &cfg, &strategy, SimOptions::default())?;
            (
                out.run.hit_time,
                out.run.final_dist_sq,
                out.stats.tau_max,
                out.stats.tau_avg,
            )
        }
        Backend::Threads => {
            let model = SharedModel::new(&setup.x0);
            let run = epoch_sgd(&setup.spec, &model, &cfg)?;
            let (tm, ta) = run
                .contention
                .as_ref()
                .map_or((0, 0.0), |c| (c.tau_max, c.tau_avg));
            (run.hit_time, run.final_dist_sq, tm, ta)
        }
    };
    Ok(TrialRecord {
        trial,
        seed,
        hit_time,
        final_dist_sq,
        tau_max,
        tau_avg,
        verdict: if hit_time.is_some() { "hit" } else { "miss" }.into(),
    })
}

fn snapshot(
    run: &EpochConfig,
    params: &BoundParams,
    strategy: &Strategy,
) -> std::collections::BTreeMap<String, String> {
    [
        ("run.threads", run.threads.to_string()),
        ("run.T", run.iterations.to_string()),
        ("run.alpha", run.alpha.to_string()),
        ("run.epsilon", run.epsilon.to_string()),
        ("run.theta", params.theta.to_string()),
        ("run.seed", run.seed.to_string()),
        ("sim.strategy", strategy.name()),
        ("sim.tau_max", params.tau_max.to_string()),
        ("bound.c", params.c.to_string()),
        ("bound.L", params.l.to_string()),
        ("bound.M", params.m.to_string()),
        ("bound.x0_dist_sq", params.x0_dist_sq.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Outcome of the stale-gradient adversary for one delay.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowdownRow {
    pub tau: u64,
    /// Iterations the adversarial run needs until a round boundary with
    /// `|x| ≤ target`.
    pub adversarial_iterations: u64,
    /// Iterations sequential SGD needs to reach `|x| ≤ target`.
    pub sequential_iterations: u64,
    pub measured_ratio: f64,
    /// Ratio of per-iteration log-contraction rates.
    pub rate_ratio: f64,
    pub theoretical_factor: f64,
    /// `|(1−α)^τ − α|`.
    pub expected_round_contraction: f64,
    /// Largest deviation of an observed round contraction from the
    /// expected one.
    pub max_contraction_error: f64,
    pub rounds: u64,
    pub trace_hash: String,
}

/// Default target contraction of the slowdown experiment.
pub const SLOWDOWN_TARGET: f64 = 1e-60;

/// Runs the stale-gradient adversary and sequential SGD on `f(x) = ½x²`
/// with no noise from `x_0 = 1` until `|x| ≤ target`.
pub fn slowdown_row(alpha: f64, tau: u64, target: f64) -> Result<SlowdownRow, HarnessError> {
    let factor = lower_bound_slowdown(alpha, tau)?;
    if !(target > 0.0 && target < 1.0) {
        return Err(HarnessError::Invalid(format!("target must lie in (0, 1), got {target}")));
    }
    let spec = quadratic_problem(1, 0.0)?;
    let q = ((1.0 - alpha).powi(tau as i32) - alpha).abs();
    if q >= 1.0 || q == 0.0 {
        return Err(HarnessError::Invalid(format!(
            "round contraction {q} does not converge geometrically"
        )));
    }
    let round = tau + 1;
    let rounds_needed = (target.ln() / q.ln()).ceil() as u64 + 1;
    let cfg = EpochConfig {
        iterations: rounds_needed * round,
        alpha,
        threads: 2,
        epsilon: target * target,
        seed: 0,
        trace: true,
    };
    let adv = simulate(&spec, &[1.0], &cfg, &Strategy::StaleReplay { tau }, SimOptions::default())?;
    let xs = adv.trace.accumulators();
    let mut max_err = 0.0f64;
    let mut rounds = None;
    for r in 0..rounds_needed as usize {
        let (a, b) = (xs[r * round as usize][0], xs[(r + 1) * round as usize][0]);
        max_err = max_err.max(((b / a).abs() - q).abs());
        if rounds.is_none() && b.abs() <= target {
            rounds = Some(r as u64 + 1);
        }
    }
    let rounds = rounds.ok_or_else(|| HarnessError::Invalid("target not reached".into()))?;

    let seq_needed = (target.ln() / (1.0 - alpha).ln()).ceil() as u64 + 1;
    let seq_cfg = EpochConfig {
        iterations: seq_needed,
        threads: 1,
        ..cfg
    };
    let seq = simulate(&spec, &[1.0], &seq_cfg, &Strategy::Sequential, SimOptions::default())?;
    let sequential_iterations = seq
        .trace
        .accumulators()
        .iter()
        .position(|x| x[0].abs() <= target)
        .ok_or_else(|| HarnessError::Invalid("sequential run missed the target".into()))?
        as u64;
    let adversarial_iterations = rounds * round;
    Ok(SlowdownRow {
        tau,
        adversarial_iterations,
        sequential_iterations,
        measured_ratio: adversarial_iterations as f64 / sequential_iterations as f64,
        rate_ratio: round as f64 * (1.0 - alpha).ln() / q.ln(),
        theoretical_factor: factor,
        expected_round_contraction: q,
        max_contraction_error: max_err,
        rounds,
        trace_hash: adv.trace_hash(),
    })
}

/// For each `τ`, the adversarial-to-sequential iteration ratio against
/// the theoretical slowdown factor.
///
/// Each row passes iff the measured ratio is at least 0.9 times the
/// factor and every adversarial round contracts by exactly
/// `|(1−α)^τ − α|` (to 1e-9). The noise-free runs are deterministic, so
/// the `trials` repetitions must reproduce the same trace.
pub fn run_slowdown_experiment(alpha: f64, taus: &[u64], trials: usize) -> Result<ExperimentReport, HarnessError> {
    let started = Instant::now();
    let mut report = ExperimentReport::new("slowdown");
    report.config.insert("alpha".into(), alpha.to_string());
    report.config.insert(
        "taus".into(),
        taus.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
    );
    report.config.insert("target".into(), SLOWDOWN_TARGET.to_string());
    report.config.insert("trials".into(), trials.to_string());
    let threshold = minimal_adversary_tau(alpha)?;
    report.bounds.insert("minimal_tau".into(), threshold as f64);
    for &tau in taus {
        if tau < threshold {
            report.warnings.push(format!(
                "adversary too weak: τ = {tau} is below the threshold {threshold} for α = {alpha}"
            ));
        }
        let row = slowdown_row(alpha, tau, SLOWDOWN_TARGET)?;
        let mut repeat = Verdict::new(format!("deterministic replay (τ={tau})"), "identical trace hash on every repetition");
        for _ in 1..trials.max(1) {
            let again = slowdown_row(alpha, tau, SLOWDOWN_TARGET)?;
            repeat.record(again.trace_hash == row.trace_hash, || "trace hash changed".into());
        }
        let key = |s: &str| format!("tau_{tau}.{s}");
        report.aggregates.insert(key("measured_ratio"), row.measured_ratio);
        report.aggregates.insert(key("rate_ratio"), row.rate_ratio);
        report.aggregates.insert(key("adversarial_iterations"), row.adversarial_iterations as f64);
        report.aggregates.insert(key("sequential_iterations"), row.sequential_iterations as f64);
        report.aggregates.insert(key("max_contraction_error"), row.max_contraction_error);
        report.bounds.insert(key("factor"), row.theoretical_factor);
        report.bounds.insert(key("round_contraction"), row.expected_round_contraction);

        let mut v = Verdict::new(
            format!("slowdown (τ={tau})"),
            "measured ratio ≥ 0.9·factor and every round contraction within 1e-9, deterministic",
        );
        v.record(row.measured_ratio >= 0.9 * row.theoretical_factor, || {
            format!(
                "ratio {} < 0.9·{}",
                row.measured_ratio, row.theoretical_factor
            )
        });
        v.record(row.max_contraction_error <= 1e-9, || {
            format!("round contraction off by {}", row.max_contraction_error)
        });
        report.verdicts.push(v);
        if repeat.sample_size > 0 {
            report.verdicts.push(repeat);
        }
        report.trials.push(TrialRecord {
            trial: report.trials.len() as u64,
            seed: 0,
            hit_time: Some(row.adversarial_iterations),
            final_dist_sq: 0.0,
            tau_max: tau,
            tau_avg: row.measured_ratio,
            verdict: if report.verdicts.iter().rev().all(|v| v.passed) { "pass" } else { "fail" }.into(),
        });
    }
    report
        .timings
        .insert("total_seconds".into(), started.elapsed().as_secs_f64());
    Ok(report)
}

/// One family of simulated executions in an invariant sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub threads: usize,
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub iterations: u64,
    pub dim: usize,
    pub sigma: f64,
    pub alpha: f64,
}

impl SweepConfig {
    pub fn label(&self) -> String {
        format!("n={} {}", self.threads, self.strategy.name())
    }
}

/// `n ∈ {2, 4, 8}` against round-robin, uniform random, bounded delay 8
/// and 32, and stale replay (two threads only), 20 seeds each, `T = 2048`.
pub fn default_sweep() -> (Vec<SweepConfig>, Vec<String>) {
    let mut configs = Vec::new();
    let mut skipped = Vec::new();
    for n in [2usize, 4, 8] {
        let strategies = [
            Strategy::RoundRobin,
            Strategy::UniformRandom { seed: 0 },
            Strategy::BoundedDelay { tau_max: 8, seed: 0 },
            Strategy::BoundedDelay { tau_max: 32, seed: 0 },
            Strategy::StaleReplay { tau: 4 },
        ];
        for strategy in strategies {
            if matches!(strategy, Strategy::StaleReplay { .. }) && n != 2 {
                skipped.push(format!("n={n} {}: defined for two threads only", strategy.name()));
                continue;
            }
            configs.push(SweepConfig {
                threads: n,
                strategy,
                seeds: (0..20).map(|s| mix(0xA5D, (n as u64) << 8 | s)).collect(),
                iterations: 2048,
                dim: 3,
                sigma: 0.5,
                alpha: 0.05,
            });
        }
    }
    (configs, skipped)
}

/// Sequential executions only; every delay and contention is zero.
pub fn sequential_sweep() -> Vec<SweepConfig> {
    [1usize, 2, 4]
        .into_iter()
        .map(|n| SweepConfig {
            threads: n,
            strategy: Strategy::Sequential,
            seeds: (0..5).collect(),
            iterations: 512,
            dim: 3,
            sigma: 0.5,
            alpha: 0.05,
        })
        .collect()
}

/// Every exhaustive trace check of one execution.
pub fn trace_checks(trace: &ScheduleTrace) -> Vec<Verdict> {
    let mut out = Vec::new();
    let mut order = Verdict::new("iteration-order", "trace is a legal total order");
    order.record(trace.validate().is_ok(), || {
        trace.validate().err().map(|e| e.to_string()).unwrap_or_default()
    });
    out.push(order);
    for k in [1, 2, 4] {
        out.push(trace.check_bad_iteration_windows(k));
    }
    out.push(trace.check_indicator_bound());
    out.push(trace.check_incomplete_bound());
    out.push(trace.check_view_staleness());
    out.push(trace.check_view_containment());
    out.push(trace.check_average_contention());
    out
}

fn merge_into(acc: &mut Vec<Verdict>, verdicts: Vec<Verdict>, label: &str) {
    for mut v in verdicts {
        if let Some(c) = v.counterexample.take() {
            v.counterexample = Some(format!("{label}: {c}"));
        }
        match acc.iter_mut().find(|a| a.name == v.name) {
            Some(a) => a.merge(&v),
            None => acc.push(v),
        }
    }
}

/// Runs every config under every seed and checks all schedule invariants;
/// also confirms that a deliberately illegal trace is rejected.
pub fn run_invariant_sweep(configs: &[SweepConfig]) -> Result<ExperimentReport, HarnessError> {
    let started = Instant::now();
    let mut report = ExperimentReport::new("invariant-sweep");
    let jobs: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Result<(usize, u64, Vec<Verdict>, u64, u64, f64), HarnessError>> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let c = &configs[i];
            let spec = quadratic_problem(c.dim, c.sigma)?;
            let x0 = vec![1.0; c.dim];
            let cfg = EpochConfig {
                iterations: c.iterations,
                alpha: c.alpha,
                threads: c.threads,
                epsilon: 1e-12,
                seed,
                trace: true,
            };
            let strategy = c.strategy.reseeded(mix(seed, 7));
            let out = simulate(&spec, &x0, &cfg, &strategy, SimOptions::default())?;
            let mut checks = trace_checks(&out.trace);
            if let Some(cap) = strategy.contention_bound() {
                let mut v = Verdict::new("strategy contention cap", "measured τ_max ≤ the strategy's cap");
                v.record(out.stats.tau_max <= cap, || {
                    format!("τ_max = {} > cap {cap}", out.stats.tau_max)
                });
                checks.push(v);
            }
            Ok((i, seed, checks, out.stats.tau_max, out.stats.max_delay, out.stats.tau_avg))
        })
        .collect();
    let mut max_rho = 0u64;
    let mut max_delay = 0u64;
    let mut max_avg = 0.0f64;
    for r in results {
        let (i, seed, checks, tm, md, ta) = r?;
        max_rho = max_rho.max(tm);
        max_delay = max_delay.max(md);
        max_avg = max_avg.max(ta);
        report.trials.push(TrialRecord {
            trial: report.trials.len() as u64,
            seed,
            hit_time: None,
            final_dist_sq: 0.0,
            tau_max: tm,
            tau_avg: ta,
            verdict: if checks.iter().all(|v| v.passed) { "pass" } else { "fail" }.into(),
        });
        merge_into(&mut report.verdicts, checks, &format!("{} seed {seed}", configs[i].label()));
        report.seeds.push(seed);
    }
    // A correct checker must reject the illegal fixture.
    let fixture = contention_fixture(2, 1);
    let caught = !fixture.check_bad_iteration_windows(1).passed;
    let mut v = Verdict::new("illegal fixture detected", "contention check rejects a constructed violation");
    v.record(caught, || "fixture passed the contention check".into());
    report.verdicts.push(v);

    report.aggregates.insert("executions".into(), jobs.len() as f64);
    report.aggregates.insert("max_interval_contention".into(), max_rho as f64);
    report.aggregates.insert("max_delay".into(), max_delay as f64);
    report.aggregates.insert("max_tau_avg".into(), max_avg);
    for (i, c) in configs.iter().enumerate() {
        report.config.insert(format!("config.{i:02}"), format!("{} T={} d={}", c.label(), c.iterations, c.dim));
    }
    report
        .timings
        .insert("total_seconds".into(), started.elapsed().as_secs_f64());
    Ok(report)
}

/// Epoch-based SGD on real threads, repeated over independent seeds.
///
/// Passes iff the sample mean of `‖r − x*‖` is at most `ε + 3·stderr`,
/// every trial ran `⌈log₂(α·2Mn/√ε)⌉ + 1` epochs, and, when traced, the
/// gradients still pending at each epoch's hit time carry mass at most
/// `α·n·M`.
pub fn run_fullsgd_experiment(
    spec: &ProblemSpec,
    x0: &[f64],
    cfg: &EpochConfig,
    trials: usize,
) -> Result<ExperimentReport, HarnessError> {
    check_trials(trials)?;
    let started = Instant::now();
    let m = spec.gradient_bound();
    let expected_epochs = halving_epochs(cfg.alpha, m, cfg.threads, cfg.epsilon) + 1;
    let seeds = trial_seeds(cfg.seed, trials);
    let runs: Vec<_> = seeds
        .par_iter()
        .map(|&seed| {
            full_sgd(
                spec,
                x0,
                &EpochConfig {
                    seed,
                    ..cfg.clone()
                },
                m,
            )
        })
        .collect();
    let mut report = ExperimentReport::new("fullsgd");
    report.config = [
        ("problem.d", spec.dim.to_string()),
        ("problem.sigma", spec.sigma().map(|s| s.to_string()).unwrap_or_default()),
        ("run.threads", cfg.threads.to_string()),
        ("run.T", cfg.iterations.to_string()),
        ("run.alpha", cfg.alpha.to_string()),
        ("run.epsilon", cfg.epsilon.to_string()),
        ("run.seed", cfg.seed.to_string()),
        ("run.trace", cfg.trace.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    report.seeds = seeds.clone();
    let mut distances = Vec::with_capacity(trials);
    let mut epochs_ok = Verdict::new("epoch count", format!("every trial runs {expected_epochs} epochs"));
    let mut stale_ok = Verdict::new("stale mass at hit", "‖pending stale updates‖ ≤ α·n·M per epoch");
    let mut total_iterations = 0u64;
    for (i, (run, &seed)) in runs.into_iter().zip(&seeds).enumerate() {
        let run = run?;
        let dist = dist_sq(&run.r, &spec.x_star).sqrt();
        distances.push(dist);
        total_iterations += run.total_iterations;
        epochs_ok.record(run.epochs.len() as u64 == expected_epochs, || {
            format!("trial {i}: {} epochs", run.epochs.len())
        });
        for e in &run.epochs {
            if let Some(s) = &e.stale {
                let limit = e.alpha * cfg.threads as f64 * m;
                stale_ok.record(s.pending < cfg.threads && s.stale_mass <= limit, || {
                    format!(
                        "trial {i} epoch {}: {} pending, mass {} > {limit}",
                        e.epoch, s.pending, s.stale_mass
                    )
                });
            }
        }
        let last = run.epochs.last();
        report.trials.push(TrialRecord {
            trial: i as u64,
            seed,
            hit_time: last.and_then(|e| e.hit_time),
            final_dist_sq: dist * dist,
            tau_max: last.and_then(|e| e.contention.as_ref()).map_or(0, |c| c.tau_max),
            tau_avg: last.and_then(|e| e.contention.as_ref()).map_or(0.0, |c| c.tau_avg),
            verdict: if dist <= cfg.epsilon { "within" } else { "outside" }.into(),
        });
        report.warnings.extend(run.warnings);
    }
    report.warnings.sort();
    report.warnings.dedup();
    let (mean, stderr) = mean_stderr(&distances);
    let mut v = Verdict::new(
        "mean distance of r",
        format!("one-sided: sample mean ‖r − x*‖ ≤ ε + 3·stderr ({trials} trials)"),
    );
    v.sample_size = trials as u64;
    v.violations = distances.iter().filter(|&&d| d > cfg.epsilon).count() as u64;
    if mean > cfg.epsilon + 3.0 * stderr {
        v.passed = false;
        v.counterexample = Some(format!("mean {mean} > ε + 3·stderr = {}", cfg.epsilon + 3.0 * stderr));
    }
    report.verdicts.push(v);
    report.verdicts.push(epochs_ok);
    if stale_ok.sample_size > 0 {
        report.verdicts.push(stale_ok);
    }
    report.aggregates.insert("mean_distance".into(), mean);
    report.aggregates.insert("stderr_distance".into(), stderr);
    report.aggregates.insert("max_distance".into(), distances.iter().copied().fold(0.0, f64::max));
    report.aggregates.insert("mean_total_iterations".into(), total_iterations as f64 / trials as f64);
    report.bounds.insert("epsilon".into(), cfg.epsilon);
    report.bounds.insert("epochs".into(), expected_epochs as f64);
    report.bounds.insert("iteration_budget".into(), (cfg.iterations * expected_epochs) as f64);
    report
        .timings
        .insert("total_seconds".into(), started.elapsed().as_secs_f64());
    Ok(report)
}

/// Smallest horizon at which `variant`'s bound drops to `target`.
pub fn sized_horizon(params: &BoundParams, variant: BoundVariant, target: f64) -> Result<u64, HarnessError> {
    let unit = failure_prob_bound(&params.clone().with_horizon(1), variant)?;
    Ok((unit.raw / target).ceil().max(1.0) as u64)
}

/// Quadratic with noise 0.1 in `d` dimensions, unit start distance,
/// `ε = 0.1`, four threads under bounded delay 16, tuned step size, and
/// `T` sized so the lock-free bound is about 0.2.
pub fn bounded_delay_setup(d: usize, trials: usize, seed: u64) -> Result<FailureProbSetup, HarnessError> {
    let spec = quadratic_problem(d, 0.1)?;
    let x0 = vec![1.0 / (d as f64).sqrt(); d];
    let (threads, tau_max, epsilon) = (4, 16, 0.1);
    let mut params = BoundParams::for_problem(&spec, threads, tau_max, epsilon, 1.0, dist_sq(&x0, &spec.x_star), 1);
    params.horizon = sized_horizon(&params, BoundVariant::LockFreeTuned, 0.2)?;
    Ok(FailureProbSetup {
        run: EpochConfig {
            iterations: params.horizon,
            alpha: params.alpha,
            threads,
            epsilon,
            seed,
            trace: false,
        },
        strategy: Strategy::BoundedDelay { tau_max, seed },
        variant: BoundVariant::LockFreeTuned,
        spec,
        x0,
        params,
        trials,
        backend: Backend::Simulator,
    })
}

/// The sequential counterpart of [`bounded_delay_setup`]: one thread,
/// step size `cεϑ/M²`, `T` sized so the sequential bound is about 0.2.
pub fn sequential_setup(d: usize, trials: usize, seed: u64) -> Result<FailureProbSetup, HarnessError> {
    let spec = quadratic_problem(d, 0.1)?;
    let x0 = vec![1.0 / (d as f64).sqrt(); d];
    let epsilon = 0.1;
    let mut params = BoundParams::for_problem(&spec, 1, 0, epsilon, 1.0, dist_sq(&x0, &spec.x_star), 1);
    params.alpha = crate::theory::sequential_learning_rate(&params);
    params.horizon = sized_horizon(&params, BoundVariant::Sequential, 0.2)?;
    Ok(FailureProbSetup {
        run: EpochConfig {
            iterations: params.horizon,
            alpha: params.alpha,
            threads: 1,
            epsilon,
            seed,
            trace: false,
        },
        strategy: Strategy::Sequential,
        variant: BoundVariant::Sequential,
        spec,
        x0,
        params,
        trials,
        backend: Backend::Simulator,
    })
}

/// Epoch-based SGD setup: quadratic `d = 2`, noise 0.05, box radius 2,
/// four threads, first step size 0.5, start at unit distance.
pub fn fullsgd_setup(epsilon: f64, iterations: u64, seed: u64) -> Result<(ProblemSpec, Vec<f64>, EpochConfig), HarnessError> {
    let spec = quadratic_problem(2, 0.05)?.with_radius(2.0)?;
    let x0 = vec![std::f64::consts::FRAC_1_SQRT_2; 2];
    let cfg = EpochConfig {
        iterations,
        alpha: 0.5,
        threads: 4,
        epsilon,
        seed,
        trace: true,
    };
    Ok((spec, x0, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_known_values() {
        let (lo, hi) = wilson_interval(0, 100, Z95);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.036995).abs() < 1e-5);
        let (lo, hi) = wilson_interval(50, 100, Z95);
        assert!((lo - 0.403832).abs() < 1e-5 && (hi - 0.596168).abs() < 1e-5);
    }

    #[test]
    fn slowdown_threshold_case() {
        let row = slowdown_row(0.5, 2, 1e-30).unwrap();
        assert!((row.expected_round_contraction - 0.25).abs() < 1e-15);
        assert!(row.max_contraction_error < 1e-12);
        assert!((row.theoretical_factor - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_trials() {
        let spec = quadratic_problem(1, 0.0).unwrap();
        let cfg = EpochConfig {
            iterations: 10,
            alpha: 0.1,
            threads: 1,
            epsilon: 0.01,
            seed: 0,
            trace: false,
        };
        assert!(matches!(
            run_fullsgd_experiment(&spec, &[1.0], &cfg, 5),
            Err(HarnessError::TooFewTrials { .. })
        ));
    }

    #[test]
    fn sequential_sweep_is_all_zero() {
        let report = run_invariant_sweep(&sequential_sweep()).unwrap();
        assert!(report.passed());
        assert_eq!(report.aggregates["max_interval_contention"], 0.0);
        assert_eq!(report.aggregates["max_delay"], 0.0);
    }
}
