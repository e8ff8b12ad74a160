//! Real-thread lock-free SGD.
//!
//! [`epoch_sgd`] runs the per-thread loop on `n` OS threads: claim an
//! iteration from the shared counter, read a view entry by entry, draw a
//! stochastic gradient at the view, and apply `−α g̃[j]` to every entry with
//! an atomic add. `X[0]` is always touched, even with a zero delta, so that
//! the first update on `X[0]` totally orders the iterations; other zero
//! entries are skipped.
//!
//! [`full_sgd`] chains epochs with a halving learning rate. Each epoch gets
//! its own model buffer, so a gradient generated in one epoch can never be
//! applied to another.

use std::any::Any;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;

use thiserror::Error;

use crate::problems::{dist_sq, l2, GradientOracle};
use crate::rng::{mix, thread_stream};
use crate::shared_model::{IterationRecord, SharedModel};
use crate::trace::{ContentionStats, ScheduleTrace};
use crate::verdict::Verdict;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model has dimension {model}, problem has {problem}")]
    DimensionMismatch { model: usize, problem: usize },
    #[error("worker thread {thread} crashed: {message}")]
    WorkerCrashed {
        thread: usize,
        message: String,
        partial: Box<RunResult>,
    },
}

/// Inputs of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochConfig {
    /// Iterations `T` to run.
    pub iterations: u64,
    pub alpha: f64,
    pub threads: usize,
    /// Success threshold on `‖x_t − x*‖²`.
    pub epsilon: f64,
    pub seed: u64,
    /// Capture full iteration records and event ranks.
    pub trace: bool,
}

impl EpochConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(EngineError::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.threads == 0 {
            return Err(EngineError::InvalidConfig("threads must be at least 1".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(EngineError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Outcome of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// First `t` with `‖x_t − x*‖² ≤ ε`, on the ordered accumulator.
    pub hit_time: Option<u64>,
    pub iterations: u64,
    /// Contents of `X` after all workers joined.
    pub final_model: Vec<f64>,
    /// `x_T`: the initial model plus every generated delta, in order.
    pub final_accumulator: Vec<f64>,
    pub final_dist_sq: f64,
    pub trace: Option<ScheduleTrace>,
    pub contention: Option<ContentionStats>,
    pub warnings: Vec<String>,
}

/// Running accumulator over ordered gradients.
#[derive(Debug, Clone)]
pub struct Accumulator<'a> {
    pub x: Vec<f64>,
    alpha: f64,
    x_star: &'a [f64],
    epsilon: f64,
    t: u64,
    pub hit_time: Option<u64>,
}

impl<'a> Accumulator<'a> {
    pub fn new(x0: &[f64], alpha: f64, x_star: &'a [f64], epsilon: f64) -> Self {
        let hit_time = (dist_sq(x0, x_star) <= epsilon).then_some(0);
        Accumulator {
            x: x0.to_vec(),
            alpha,
            x_star,
            epsilon,
            t: 0,
            hit_time,
        }
    }

    /// `x_{t+1} = x_t − α g̃_t`.
    pub fn push(&mut self, gradient: &[f64]) {
        for (xi, gi) in self.x.iter_mut().zip(gradient) {
            *xi += -self.alpha * gi;
        }
        self.t += 1;
        if self.hit_time.is_none() && dist_sq(&self.x, self.x_star) <= self.epsilon {
            self.hit_time = Some(self.t);
        }
    }

    pub fn dist_sq(&self) -> f64 {
        dist_sq(&self.x, self.x_star)
    }
}

struct WorkerLog {
    records: Vec<IterationRecord>,
    /// Sum of this worker's applied deltas (final FullSGD epoch only).
    local_sum: Option<Vec<f64>>,
    failure: Option<String>,
}

struct Shared<'a, O> {
    oracle: &'a O,
    model: &'a SharedModel,
    cfg: &'a EpochConfig,
    clock: AtomicU64,
}

impl<O: GradientOracle> Shared<'_, O> {
    fn tick(&self) -> u64 {
        if self.cfg.trace {
            self.clock.fetch_add(1, Ordering::SeqCst) + 1
        } else {
            0
        }
    }

    fn work(&self, thread: usize, accumulate: bool) -> WorkerLog {
        let mut log = WorkerLog {
            records: Vec::new(),
            local_sum: accumulate.then(|| vec![0.0; self.model.dim()]),
            failure: None,
        };
        let outcome = catch_unwind(AssertUnwindSafe(|| self.work_loop(thread, &mut log)));
        if let Err(payload) = outcome {
            log.failure = Some(panic_message(payload.as_ref()));
        }
        log
    }

    fn work_loop(&self, thread: usize, log: &mut WorkerLog) {
        let d = self.model.dim();
        let alpha = self.cfg.alpha;
        let mut rng = thread_stream(self.cfg.seed, thread);
        let mut view = vec![0.0; d];
        let mut versions = vec![0u64; d];
        loop {
            if self.model.next_iteration() >= self.cfg.iterations {
                return;
            }
            let start_event = self.tick();
            self.model.read_view_into(&mut view, &mut versions);
            let mut gradient = vec![0.0; d];
            self.oracle.gradient_into(&view, &mut rng, &mut gradient);
            let mut positions = vec![None; d];
            let (_, order) = self.model.atomic_add_versioned(0, -alpha * gradient[0]);
            positions[0] = Some(order);
            let first_add_event = self.tick();
            for j in 1..d {
                if gradient[j] != 0.0 {
                    positions[j] = Some(self.model.atomic_add_versioned(j, -alpha * gradient[j]).1);
                }
            }
            let end_event = self.tick();
            if let Some(sum) = log.local_sum.as_mut() {
                for (s, g) in sum.iter_mut().zip(&gradient) {
                    *s += -alpha * g;
                }
            }
            let (view_out, versions_out, positions_out) = if self.cfg.trace {
                (view.clone(), versions.clone(), positions)
            } else {
                (Vec::new(), Vec::new(), Vec::new())
            };
            log.records.push(IterationRecord {
                index: order,
                thread,
                start_event,
                first_add_event,
                end_event,
                view: view_out,
                view_versions: versions_out,
                gradient,
                add_positions: positions_out,
                epoch: self.model.epoch(),
            });
        }
    }
}

fn panic_message(payload: &(dyn Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

/// Runs one epoch of lock-free SGD on `model` with `cfg.threads` workers.
///
/// A crashed worker is reported as [`EngineError::WorkerCrashed`] naming
/// the first failed thread; the partial result of everything the surviving
/// iterations did is attached.
pub fn epoch_sgd<O: GradientOracle>(
    oracle: &O,
    model: &SharedModel,
    cfg: &EpochConfig,
) -> Result<RunResult, EngineError> {
    Ok(run_epoch(oracle, model, cfg, false)?.0)
}

fn run_epoch<O: GradientOracle>(
    oracle: &O,
    model: &SharedModel,
    cfg: &EpochConfig,
    accumulate: bool,
) -> Result<(RunResult, Vec<Vec<f64>>), EngineError> {
    cfg.validate()?;
    if model.dim() != oracle.dim() {
        return Err(EngineError::DimensionMismatch {
            model: model.dim(),
            problem: oracle.dim(),
        });
    }
    let x0 = model.read_view();
    let shared = Shared {
        oracle,
        model,
        cfg,
        clock: AtomicU64::new(0),
    };
    let logs: Vec<WorkerLog> = thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.threads)
            .map(|i| {
                let shared = &shared;
                scope.spawn(move || shared.work(i, accumulate))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|p| WorkerLog {
                    records: Vec::new(),
                    local_sum: None,
                    failure: Some(panic_message(p.as_ref())),
                })
            })
            .collect()
    });

    let mut failure = None;
    let mut records = Vec::new();
    let mut sums = Vec::new();
    for (thread, log) in logs.into_iter().enumerate() {
        if failure.is_none() {
            failure = log.failure.map(|m| (thread, m));
        }
        records.extend(log.records);
        sums.extend(log.local_sum);
    }
    records.sort_by_key(|r| r.index);

    let mut acc = Accumulator::new(&x0, cfg.alpha, oracle.minimizer(), cfg.epsilon);
    for r in &records {
        acc.push(&r.gradient);
    }
    let trace = cfg.trace.then(|| ScheduleTrace {
        threads: cfg.threads,
        dim: model.dim(),
        alpha: cfg.alpha,
        x0: x0.clone(),
        iterations: records.clone(),
        events: vec![],
        choices: vec![],
    });
    let contention = trace.as_ref().map(ScheduleTrace::contention_stats);
    let result = RunResult {
        hit_time: acc.hit_time,
        iterations: records.len() as u64,
        final_model: model.read_view(),
        final_dist_sq: acc.dist_sq(),
        final_accumulator: acc.x,
        trace,
        contention,
        warnings: vec![],
    };
    match failure {
        Some((thread, message)) => Err(EngineError::WorkerCrashed {
            thread,
            message,
            partial: Box::new(result),
        }),
        None => Ok((result, sums)),
    }
}

/// Number of halving epochs before the final one:
/// `⌈log₂(α·2Mn/√ε)⌉`, or zero when the argument is at most 1.
pub fn halving_epochs(alpha: f64, gradient_bound: f64, threads: usize, epsilon: f64) -> u64 {
    let arg = alpha * 2.0 * gradient_bound * threads as f64 / epsilon.sqrt();
    if arg <= 1.0 {
        0
    } else {
        arg.log2().ceil() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub alpha: f64,
    pub start: Vec<f64>,
    pub hit_time: Option<u64>,
    pub end: Vec<f64>,
    pub contention: Option<ContentionStats>,
    pub stale: Option<StaleReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullSgdResult {
    /// Final-epoch start plus the entry-wise sum of every worker's local
    /// accumulator.
    pub r: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
    pub total_iterations: u64,
    pub warnings: Vec<String>,
}

/// Epoch-based SGD with per-epoch learning-rate halving.
///
/// `cfg.alpha` is the first epoch's rate and `cfg.iterations` the length of
/// every epoch. `gradient_bound` is `M`.
pub fn full_sgd<O: GradientOracle>(
    oracle: &O,
    x0: &[f64],
    cfg: &EpochConfig,
    gradient_bound: f64,
) -> Result<FullSgdResult, EngineError> {
    cfg.validate()?;
    if x0.len() != oracle.dim() {
        return Err(EngineError::DimensionMismatch {
            model: x0.len(),
            problem: oracle.dim(),
        });
    }
    let pre = halving_epochs(cfg.alpha, gradient_bound, cfg.threads, cfg.epsilon);
    let mut warnings = Vec::new();
    if pre == 0 {
        let msg = format!(
            "α·2Mn/√ε = {} ≤ 1: running a single epoch",
            cfg.alpha * 2.0 * gradient_bound * cfg.threads as f64 / cfg.epsilon.sqrt()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut start = x0.to_vec();
    let mut alpha = cfg.alpha;
    let mut epochs = Vec::new();
    let mut total = 0;
    for epoch in 0..=pre {
        let last = epoch == pre;
        let model = SharedModel::with_epoch(&start, epoch);
        let epoch_cfg = EpochConfig {
            alpha,
            seed: mix(cfg.seed, epoch),
            ..cfg.clone()
        };
        let (result, sums) = run_epoch(oracle, &model, &epoch_cfg, last)?;
        if let Some(trace) = &result.trace {
            debug_assert!(check_epoch_isolation(trace, epoch).passed);
        }
        total += result.iterations;
        let stale = match (&result.trace, result.hit_time) {
            (Some(trace), Some(t)) if t > 0 => Some(stale_updates_at_hit(trace, t)),
            _ => None,
        };
        let end = if last {
            let mut r = start.clone();
            for sum in &sums {
                for (ri, si) in r.iter_mut().zip(sum) {
                    *ri += si;
                }
            }
            r
        } else {
            result.final_accumulator.clone()
        };
        epochs.push(EpochSummary {
            epoch,
            alpha,
            start: start.clone(),
            hit_time: result.hit_time,
            end: end.clone(),
            contention: result.contention,
            stale,
        });
        start = end;
        alpha /= 2.0;
    }
    Ok(FullSgdResult {
        r: start,
        epochs,
        total_iterations: total,
        warnings,
    })
}

/// Every record in `trace` carries epoch tag `epoch`.
pub fn check_epoch_isolation(trace: &ScheduleTrace, epoch: u64) -> Verdict {
    let mut v = Verdict::new("epoch-isolation", "every applied delta carries the buffer's epoch tag");
    for it in &trace.iterations {
        v.record(it.epoch == epoch, || {
            format!("iteration {} tagged {} on buffer {epoch}", it.index, it.epoch)
        });
    }
    v
}

/// Gradients generated before the accumulator entered the success region
/// but ordered after it.
#[derive(Debug, Clone, PartialEq)]
pub struct StaleReport {
    pub hit_time: u64,
    /// Iterations with index `≥ t` already running when iteration `t − 1`
    /// made its first update.
    pub pending: usize,
    /// `‖α Σ g̃‖` over those iterations.
    pub stale_mass: f64,
}

pub fn stale_updates_at_hit(trace: &ScheduleTrace, hit_time: u64) -> StaleReport {
    let t = hit_time as usize;
    let moment = trace.iterations[t - 1].first_add_event;
    let mut sum = vec![0.0; trace.dim];
    let mut pending = 0;
    for it in &trace.iterations[t..] {
        if it.start_event < moment {
            pending += 1;
            for (s, g) in sum.iter_mut().zip(&it.gradient) {
                *s += trace.alpha * g;
            }
        }
    }
    StaleReport {
        hit_time,
        pending,
        stale_mass: l2(&sum),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::quadratic_problem;

    fn cfg(iterations: u64, alpha: f64, threads: usize) -> EpochConfig {
        EpochConfig {
            iterations,
            alpha,
            threads,
            epsilon: 0.3,
            seed: 1,
            trace: true,
        }
    }

    #[test]
    fn single_thread_hand_iteration() {
        let spec = quadratic_problem(1, 0.0).unwrap();
        let model = SharedModel::new(&[1.0]);
        let result = epoch_sgd(&spec, &model, &cfg(3, 0.5, 1)).unwrap();
        let xs = result.trace.as_ref().unwrap().accumulators();
        let xs: Vec<f64> = xs.iter().map(|x| x[0]).collect();
        assert_eq!(xs, vec![1.0, 0.5, 0.25, 0.125]);
        assert_eq!(result.hit_time, Some(1));
        assert_eq!(result.final_model, vec![0.125]);
    }

    #[test]
    fn zero_iterations() {
        let spec = quadratic_problem(2, 0.1).unwrap();
        let model = SharedModel::new(&[1.0, -1.0]);
        let result = epoch_sgd(&spec, &model, &cfg(0, 0.5, 3)).unwrap();
        assert_eq!(result.iterations, 0);
        assert_eq!(result.final_model, vec![1.0, -1.0]);
        assert_eq!(result.final_accumulator, vec![1.0, -1.0]);
    }

    #[test]
    fn epoch_count_examples() {
        // α·2Mn/√ε = 8 → three halving epochs.
        assert_eq!(halving_epochs(1.0, 1.0, 4, 1.0), 3);
        assert_eq!(halving_epochs(0.1, 1.0, 1, 1.0), 0);
        assert_eq!(halving_epochs(1.0, 4.5, 1, 1.0), 4);
    }

    #[test]
    fn learning_rate_halves() {
        let spec = quadratic_problem(1, 0.0).unwrap();
        let c = EpochConfig {
            iterations: 2,
            alpha: 0.8,
            threads: 1,
            epsilon: 1.0,
            seed: 0,
            trace: false,
        };
        // α·2Mn/√ε = 0.8·2·M with M = 10: ⌈log₂ 16⌉ = 4.
        let result = full_sgd(&spec, &[1.0], &c, 10.0).unwrap();
        let rates: Vec<f64> = result.epochs.iter().map(|e| e.alpha).collect();
        assert_eq!(rates, vec![0.8, 0.4, 0.2, 0.1, 0.05]);
        assert_eq!(result.total_iterations, 10);
    }

    #[test]
    fn rejects_bad_config() {
        let spec = quadratic_problem(1, 0.0).unwrap();
        let model = SharedModel::new(&[1.0]);
        assert!(epoch_sgd(&spec, &model, &cfg(1, 0.0, 1)).is_err());
        assert!(epoch_sgd(&spec, &model, &cfg(1, 0.1, 0)).is_err());
        let wrong = SharedModel::new(&[1.0, 2.0]);
        assert!(matches!(
            epoch_sgd(&spec, &wrong, &cfg(1, 0.1, 1)),
            Err(EngineError::DimensionMismatch { .. })
        ));
    }
}
