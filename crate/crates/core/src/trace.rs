//! Schedule traces and the exact delay/contention analysis run on them.
//!
//! A [`ScheduleTrace`] is produced both by the simulator and by the
//! instrumented threaded engine. Iterations are ordered by their first
//! update on `X[0]`; iteration `t` reads view `v_t`, draws `g̃_t`, and the
//! accumulator advances as `x_{t+1} = x_t − α g̃_t`. Views record how many
//! adds they observed on each cell, which fixes their update content
//! exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::problems::l2;
use crate::shared_model::IterationRecord;
use crate::verdict::Verdict;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("illegal schedule: {0}")]
    IllegalSchedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    CounterFaa { value: u64 },
    Read { index: usize, value: f64 },
    Add { index: usize, delta: f64 },
    LocalCompute,
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::CounterFaa { .. } => "faa",
            EventKind::Read { .. } => "read",
            EventKind::Add { .. } => "add",
            EventKind::LocalCompute => "compute",
        }
    }
}

/// One shared-memory step (or the zero-cost local compute step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub rank: u64,
    pub thread: usize,
    pub kind: EventKind,
    /// Step number within the thread's current iteration.
    pub local_step: u32,
}

/// Per-iteration contention and delay measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentionStats {
    /// Interval contention `ρ` per iteration (by order index).
    pub rho: Vec<u64>,
    /// Delay `τ_t` per iteration.
    pub tau: Vec<u64>,
    /// `max ρ`.
    pub tau_max: u64,
    /// Mean of `ρ`.
    pub tau_avg: f64,
    /// `max τ_t`.
    pub max_delay: u64,
    /// Bad iterations (`K = 1`) completing in each window of `n`
    /// consecutive starts.
    pub bad_per_window: Vec<u64>,
}

/// Complete record of one execution of the SGD loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTrace {
    pub threads: usize,
    pub dim: usize,
    pub alpha: f64,
    pub x0: Vec<f64>,
    /// Sorted by `index`; `iterations[t].index == t`.
    pub iterations: Vec<IterationRecord>,
    /// Step-level events; empty unless recording was enabled.
    pub events: Vec<SimEvent>,
    /// Scheduler decisions (thread per step); empty for real threads.
    pub choices: Vec<u32>,
}

impl ScheduleTrace {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    /// Trace with span data only, for checks that need no views.
    pub fn from_spans(threads: usize, spans: &[(usize, u64, u64)]) -> Self {
        let mut order: Vec<usize> = (0..spans.len()).collect();
        order.sort_by_key(|&i| spans[i].1);
        let iterations = order
            .iter()
            .enumerate()
            .map(|(index, &i)| {
                let (thread, start, end) = spans[i];
                IterationRecord {
                    index: index as u64,
                    thread,
                    start_event: start,
                    first_add_event: start,
                    end_event: end,
                    view: vec![],
                    view_versions: vec![],
                    gradient: vec![],
                    add_positions: vec![],
                    epoch: 0,
                }
            })
            .collect();
        ScheduleTrace {
            threads,
            dim: 0,
            alpha: 0.0,
            x0: vec![],
            iterations,
            events: vec![],
            choices: vec![],
        }
    }

    /// Checks the structural rules of a legal execution: gapless order
    /// indices, ordered event ranks within each iteration, and no thread
    /// running two iterations at once.
    pub fn validate(&self) -> Result<(), TraceError> {
        for (t, it) in self.iterations.iter().enumerate() {
            if it.index != t as u64 {
                return Err(TraceError::IllegalSchedule(format!(
                    "order index {} at position {t}",
                    it.index
                )));
            }
            if !(it.start_event <= it.first_add_event && it.first_add_event <= it.end_event) {
                return Err(TraceError::IllegalSchedule(format!(
                    "iteration {t} has events out of order"
                )));
            }
            if it.thread >= self.threads {
                return Err(TraceError::IllegalSchedule(format!(
                    "iteration {t} on unknown thread {}",
                    it.thread
                )));
            }
        }
        let mut per_thread: Vec<Vec<(u64, u64)>> = vec![Vec::new(); self.threads];
        for it in &self.iterations {
            per_thread[it.thread].push((it.start_event, it.end_event));
        }
        for (thread, spans) in per_thread.iter_mut().enumerate() {
            spans.sort_unstable();
            if let Some(w) = spans.windows(2).find(|w| w[1].0 <= w[0].1) {
                return Err(TraceError::IllegalSchedule(format!(
                    "thread {thread} runs overlapping iterations {:?} and {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// Accumulators `x_0, …, x_T` in order-index order.
    pub fn accumulators(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.iterations.len() + 1);
        let mut x = self.x0.clone();
        out.push(x.clone());
        for it in &self.iterations {
            for (xi, gi) in x.iter_mut().zip(&it.gradient) {
                *xi += -self.alpha * gi;
            }
            out.push(x.clone());
        }
        out
    }

    /// `order[j][p]` is the index of the iteration whose add was the `p`-th
    /// applied to cell `j`.
    fn cell_orders(&self) -> Vec<Vec<u64>> {
        let mut orders: Vec<Vec<u64>> = vec![Vec::new(); self.dim];
        for it in &self.iterations {
            for (j, pos) in it.add_positions.iter().enumerate() {
                if let Some(p) = *pos {
                    let p = p as usize;
                    if orders[j].len() <= p {
                        orders[j].resize(p + 1, u64::MAX);
                    }
                    orders[j][p] = it.index;
                }
            }
        }
        orders
    }

    /// Delay `τ_t` for every iteration: the smallest `k` such that `v_t`
    /// contains every update of every iteration with index `< t − k`.
    /// Also returns, per iteration, whether the view contained an update
    /// from an iteration with index `≥ t` (which a legal trace never does).
    pub fn delays_and_containment(&self) -> (Vec<u64>, Vec<bool>) {
        let orders = self.cell_orders();
        // Smallest iteration index among adds at positions ≥ p, and largest
        // among positions < p.
        let suffix_min: Vec<Vec<u64>> = orders
            .iter()
            .map(|o| {
                let mut s = vec![u64::MAX; o.len() + 1];
                for p in (0..o.len()).rev() {
                    s[p] = s[p + 1].min(o[p]);
                }
                s
            })
            .collect();
        let prefix_max: Vec<Vec<Option<u64>>> = orders
            .iter()
            .map(|o| {
                let mut s = vec![None; o.len() + 1];
                for p in 0..o.len() {
                    s[p + 1] = Some(s[p].map_or(o[p], |m: u64| m.max(o[p])));
                }
                s
            })
            .collect();
        let mut tau = Vec::with_capacity(self.iterations.len());
        let mut contained = Vec::with_capacity(self.iterations.len());
        for it in &self.iterations {
            let t = it.index;
            let mut missing = u64::MAX;
            let mut ok = true;
            for (j, &ver) in it.view_versions.iter().enumerate() {
                let ver = (ver as usize).min(orders[j].len());
                missing = missing.min(suffix_min[j][ver]);
                if prefix_max[j][ver].is_some_and(|m| m >= t) {
                    ok = false;
                }
            }
            tau.push(if missing < t { t - missing } else { 0 });
            contained.push(ok);
        }
        (tau, contained)
    }

    pub fn delays(&self) -> Vec<u64> {
        self.delays_and_containment().0
    }

    /// Interval contention: the number of other iterations whose
    /// `[start, end]` span overlaps this one's.
    pub fn interval_contention(&self) -> Vec<u64> {
        let mut starts: Vec<u64> = self.iterations.iter().map(|i| i.start_event).collect();
        let mut ends: Vec<u64> = self.iterations.iter().map(|i| i.end_event).collect();
        starts.sort_unstable();
        ends.sort_unstable();
        self.iterations
            .iter()
            .map(|it| {
                let started_before_end = starts.partition_point(|&s| s <= it.end_event);
                let ended_before_start = ends.partition_point(|&e| e < it.start_event);
                (started_before_end - ended_before_start - 1) as u64
            })
            .collect()
    }

    pub fn contention_stats(&self) -> ContentionStats {
        let rho = self.interval_contention();
        let tau = self.delays();
        let tau_max = rho.iter().copied().max().unwrap_or(0);
        let tau_avg = if rho.is_empty() {
            0.0
        } else {
            rho.iter().sum::<u64>() as f64 / rho.len() as f64
        };
        let max_delay = tau.iter().copied().max().unwrap_or(0);
        let bad_per_window = self.bad_iterations_per_window(1);
        ContentionStats {
            rho,
            tau,
            tau_max,
            tau_avg,
            max_delay,
            bad_per_window,
        }
    }

    /// For every window of exactly `K·n` consecutive iteration starts, the
    /// number of bad iterations (more than `K·n` starts strictly inside
    /// their span) that complete between the window's first start and the
    /// next start after the window.
    pub fn bad_iterations_per_window(&self, k: usize) -> Vec<u64> {
        let kn = k * self.threads;
        if kn == 0 || self.iterations.len() < kn {
            return vec![];
        }
        let mut starts: Vec<u64> = self.iterations.iter().map(|i| i.start_event).collect();
        starts.sort_unstable();
        let mut bad_ends: Vec<u64> = self
            .iterations
            .iter()
            .filter(|it| {
                let inside = starts.partition_point(|&s| s < it.end_event)
                    - starts.partition_point(|&s| s <= it.start_event);
                inside > kn
            })
            .map(|it| it.end_event)
            .collect();
        bad_ends.sort_unstable();
        (0..=starts.len() - kn)
            .map(|i| {
                let lo = starts[i];
                let hi = starts.get(i + kn).copied().unwrap_or(u64::MAX);
                (bad_ends.partition_point(|&e| e < hi) - bad_ends.partition_point(|&e| e < lo))
                    as u64
            })
            .collect()
    }

    /// Fewer than `n` bad iterations complete during any window of `K·n`
    /// consecutive starts.
    pub fn check_bad_iteration_windows(&self, k: usize) -> Verdict {
        let n = self.threads as u64;
        let mut verdict = Verdict::new(
            format!("bad-iteration-windows(K={k})"),
            "bad completions per window < n, exhaustive",
        );
        for (w, &count) in self.bad_iterations_per_window(k).iter().enumerate() {
            verdict.record(count < n, || {
                format!("window starting at start #{w}: {count} bad iterations complete (n={n})")
            });
        }
        verdict
    }

    /// `Σ_{m=1}^{τ_max} 1{τ_{t+m} ≥ m} ≤ 2√(τ_max·n)` for every `t`, with
    /// `τ_max` the measured maximum interval contention.
    pub fn check_indicator_bound(&self) -> Verdict {
        let stats = self.contention_stats();
        check_indicator_bound_on(&stats.tau, stats.tau_max, self.threads)
    }

    /// At every event at most `n` iterations have performed their first
    /// update but not their last.
    pub fn check_incomplete_bound(&self) -> Verdict {
        let mut verdict = Verdict::new("incomplete-iterations", "max open iterations ≤ n, sweep");
        let mut marks: Vec<(u64, i8)> = Vec::with_capacity(2 * self.iterations.len());
        for it in &self.iterations {
            marks.push((it.first_add_event, 1));
            marks.push((it.end_event, -1));
        }
        // Completion at rank r closes before any open at the same rank.
        marks.sort_unstable();
        let mut open = 0i64;
        for (rank, delta) in marks {
            open += i64::from(delta);
            if delta > 0 {
                verdict.record(open <= self.threads as i64, || {
                    format!("{open} incomplete iterations at event {rank}")
                });
            }
        }
        verdict
    }

    /// `‖x_t − v_t‖ ≤ √d Σ_{k=1}^{τ_t} ‖x_{t−k+1} − x_{t−k}‖` for every `t`.
    pub fn check_view_staleness(&self) -> Verdict {
        let mut verdict = Verdict::new(
            "view-staleness",
            "‖x_t − v_t‖ ≤ √d·Σ recent step norms, exhaustive (rel. tol 1e-10)",
        );
        let xs = self.accumulators();
        let tau = self.delays();
        let mut prefix = vec![0.0; xs.len()];
        for s in 0..xs.len() - 1 {
            let step: Vec<f64> = xs[s + 1].iter().zip(&xs[s]).map(|(a, b)| a - b).collect();
            prefix[s + 1] = prefix[s] + l2(&step);
        }
        let sqrt_d = (self.dim as f64).sqrt();
        for (t, it) in self.iterations.iter().enumerate() {
            let gap: Vec<f64> = xs[t].iter().zip(&it.view).map(|(a, b)| a - b).collect();
            let lhs = l2(&gap);
            let k = (tau[t] as usize).min(t);
            let rhs = sqrt_d * (prefix[t] - prefix[t - k]);
            let tol = 1e-10 * (1.0 + l2(&xs[t]) + l2(&it.view));
            verdict.record(lhs <= rhs + tol, || {
                format!("t={t}: ‖x_t − v_t‖={lhs:e} > bound {rhs:e} (τ_t={})", tau[t])
            });
        }
        verdict
    }

    /// Every update visible in `v_t` belongs to an iteration with index
    /// `< t`.
    pub fn check_view_containment(&self) -> Verdict {
        let mut verdict = Verdict::new("view-containment", "views only contain earlier iterations");
        let (_, contained) = self.delays_and_containment();
        for (t, ok) in contained.into_iter().enumerate() {
            verdict.record(ok, || format!("view of iteration {t} contains a later update"));
        }
        verdict
    }

    /// Average interval contention is at most `2n`.
    pub fn check_average_contention(&self) -> Verdict {
        let stats = self.contention_stats();
        let mut verdict = Verdict::new("average-contention", "τ_avg ≤ 2n");
        let limit = 2.0 * self.threads as f64;
        verdict.record(stats.tau_avg <= limit, || {
            format!("τ_avg = {} > 2n = {limit}", stats.tau_avg)
        });
        verdict
    }

    /// Content hash of the schedule and everything it produced.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.threads as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        h.update(self.alpha.to_bits().to_le_bytes());
        for c in &self.choices {
            h.update(c.to_le_bytes());
        }
        for it in &self.iterations {
            h.update(it.index.to_le_bytes());
            h.update((it.thread as u64).to_le_bytes());
            h.update(it.start_event.to_le_bytes());
            h.update(it.first_add_event.to_le_bytes());
            h.update(it.end_event.to_le_bytes());
            for v in it.view.iter().chain(&it.gradient) {
                h.update(v.to_bits().to_le_bytes());
            }
            for v in &it.view_versions {
                h.update(v.to_le_bytes());
            }
            for p in &it.add_positions {
                h.update(p.map_or(u64::MAX, |p| p).to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest.iter() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    /// Step-level CSV: `rank,thread,kind,index,delta`.
    pub fn events_csv(&self) -> String {
        let mut out = String::from("rank,thread,kind,index,delta\n");
        for e in &self.events {
            let (index, delta) = match e.kind {
                EventKind::CounterFaa { value } => (value.to_string(), String::new()),
                EventKind::Read { index, .. } => (index.to_string(), String::new()),
                EventKind::Add { index, delta } => (index.to_string(), delta.to_string()),
                EventKind::LocalCompute => (String::new(), String::new()),
            };
            let _ = writeln!(out, "{},{},{},{index},{delta}", e.rank, e.thread, e.kind.label());
        }
        out
    }

    /// Iteration-level CSV:
    /// `t,thread,startEvent,endEvent,tau_t,rho,dist_sq` where `dist_sq` is
    /// `‖x_t − x*‖²`.
    pub fn iterations_csv(&self, x_star: &[f64]) -> String {
        let stats = self.contention_stats();
        let xs = self.accumulators();
        let mut out = String::from("t,thread,startEvent,endEvent,tau_t,rho,dist_sq\n");
        for (t, it) in self.iterations.iter().enumerate() {
            let _ = writeln!(
                out,
                "{t},{},{},{},{},{},{}",
                it.thread,
                it.start_event,
                it.end_event,
                stats.tau[t],
                stats.rho[t],
                crate::problems::dist_sq(&xs[t], x_star)
            );
        }
        out
    }
}

/// Indicator-sum check on an explicit delay sequence.
pub fn check_indicator_bound_on(tau: &[u64], tau_max: u64, threads: usize) -> Verdict {
    let bound = indicator_bound(tau_max, threads);
    let mut verdict = Verdict::new(
        "indicator-sum",
        "Σ_m 1{τ_(t+m) ≥ m} ≤ 2√(τ_max·n) with measured τ_max, all t",
    );
    let horizon = tau_max as usize;
    for t in 0..tau.len() {
        let sum = (1..=horizon)
            .take_while(|m| t + m < tau.len())
            .filter(|&m| tau[t + m] >= m as u64)
            .count();
        verdict.record(sum as f64 <= bound, || {
            format!("t={t}: indicator sum {sum} > {bound:.4} (τ_max={tau_max}, n={threads})")
        });
    }
    verdict
}

/// `2√(τ_max·n)`.
pub fn indicator_bound(tau_max: u64, threads: usize) -> f64 {
    2.0 * ((tau_max as f64) * threads as f64).sqrt()
}

/// A span trace in which `n` threads each hold one long iteration while
/// thread 0 illegally starts `K·n + 1` further iterations inside them; all
/// `n` long iterations then complete within a single window, so the
/// contention check must reject it.
pub fn contention_fixture(threads: usize, k: usize) -> ScheduleTrace {
    let kn = (k * threads) as u64;
    let mut spans = Vec::new();
    let mut rank = 0u64;
    let long_starts: Vec<u64> = (0..threads)
        .map(|_| {
            rank += 1;
            rank
        })
        .collect();
    for _ in 0..=kn {
        rank += 1;
        let s = rank;
        rank += 1;
        spans.push((0, s, rank));
    }
    for (thread, &s) in long_starts.iter().enumerate() {
        rank += 1;
        spans.push((thread, s, rank));
    }
    ScheduleTrace::from_spans(threads, &spans)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_spans_have_no_contention() {
        let trace = ScheduleTrace::from_spans(2, &[(0, 1, 2), (1, 3, 4), (0, 5, 6)]);
        assert_eq!(trace.interval_contention(), vec![0, 0, 0]);
        assert!(trace.check_bad_iteration_windows(1).passed);
        assert!(trace.validate().is_ok());
    }

    #[test]
    fn overlapping_pair() {
        let trace = ScheduleTrace::from_spans(2, &[(0, 1, 4), (1, 2, 3)]);
        assert_eq!(trace.interval_contention(), vec![1, 1]);
    }

    #[test]
    fn indicator_bound_value() {
        assert_eq!(indicator_bound(16, 4), 16.0);
        let v = check_indicator_bound_on(&[0; 50], 16, 4);
        assert!(v.passed);
        assert_eq!(v.sample_size, 50);
    }

    #[test]
    fn indicator_bound_detects_long_stall_pattern() {
        // Iterations t+1..t+32 all miss iteration t.
        let tau: Vec<u64> = (0..40).map(|t| if (1..=32).contains(&t) { t } else { 0 }).collect();
        let v = check_indicator_bound_on(&tau, 32, 2);
        assert!(!v.passed);
    }

    #[test]
    fn fixture_is_rejected() {
        for n in [2, 4, 8] {
            for k in [1, 2] {
                let trace = contention_fixture(n, k);
                assert!(!trace.check_bad_iteration_windows(k).passed, "n={n}, k={k}");
                assert!(trace.validate().is_err());
            }
        }
    }
}
