//! Deterministic discrete-event simulator of the lock-free SGD loop.
//!
//! Every shared-memory step is one scheduled event: the counter
//! fetch-and-add, each entry read, and each entry add. The gradient
//! computation is a single zero-cost local event. A [`Strategy`] decides
//! which thread takes the next step and may inspect the full state,
//! including every thread's drawn gradient. Executions are bit-for-bit
//! reproducible from `(problem, x0, config, strategy)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Accumulator, EpochConfig, RunResult};
use crate::problems::{GradientOracle, ProblemSpec};
use crate::rng::thread_stream;
use crate::shared_model::IterationRecord;
use crate::trace::{ContentionStats, EventKind, ScheduleTrace, SimEvent};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("illegal schedule: {0}")]
    IllegalSchedule(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("replay file: {0}")]
    Replay(String),
}

/// Scheduling policy of the adversary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// One iteration at a time; no concurrency.
    Sequential,
    /// One step per thread in turn.
    RoundRobin,
    /// Uniformly random enabled thread at every step.
    UniformRandom { seed: u64 },
    /// Holds computed-but-unapplied gradients back for as long as the
    /// interval contention of every iteration stays within `tau_max`.
    BoundedDelay { tau_max: u64, seed: u64 },
    /// Two threads: both read the round's starting point, thread 0 runs
    /// `tau` iterations, then thread 1 applies its stale gradient.
    StaleReplay { tau: u64 },
    /// Fixed sequence of thread choices.
    Scripted(Vec<u32>),
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Sequential => "sequential".into(),
            Strategy::RoundRobin => "round-robin".into(),
            Strategy::UniformRandom { .. } => "uniform-random".into(),
            Strategy::BoundedDelay { tau_max, .. } => format!("bounded-delay({tau_max})"),
            Strategy::StaleReplay { tau } => format!("stale-replay({tau})"),
            Strategy::Scripted(_) => "scripted".into(),
        }
    }

    /// Upper bound on interval contention this strategy guarantees, when
    /// it guarantees one.
    pub fn contention_bound(&self) -> Option<u64> {
        match self {
            Strategy::Sequential => Some(0),
            Strategy::BoundedDelay { tau_max, .. } => Some(*tau_max),
            Strategy::StaleReplay { tau } => Some(*tau),
            _ => None,
        }
    }

    /// Same strategy with its random seed replaced.
    pub fn reseeded(&self, seed: u64) -> Strategy {
        match self {
            Strategy::UniformRandom { .. } => Strategy::UniformRandom { seed },
            Strategy::BoundedDelay { tau_max, .. } => Strategy::BoundedDelay {
                tau_max: *tau_max,
                seed,
            },
            other => other.clone(),
        }
    }
}

/// The two-thread stale-gradient adversary.
pub fn stale_replay_adversary(tau: u64) -> Result<Strategy, SimError> {
    if tau == 0 {
        return Err(SimError::InvalidStrategy("stale replay needs τ ≥ 1".into()));
    }
    Ok(Strategy::StaleReplay { tau })
}

/// Where a simulated thread is in its loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Next step is the counter fetch-and-add.
    Claim,
    Read(usize),
    Compute,
    /// Next step adds to entry `j`; `Add(0)` means the gradient is drawn
    /// but nothing has been applied.
    Add(usize),
    Done,
}

struct SimThread {
    phase: Phase,
    rng: ChaCha8Rng,
    view: Vec<f64>,
    versions: Vec<u64>,
    gradient: Vec<f64>,
    current: usize,
    rho: u64,
    completed: u64,
    local_step: u32,
}

/// Read-only view of the simulation handed to schedulers.
pub struct SimState {
    threads: Vec<SimThread>,
    cells: Vec<f64>,
    counts: Vec<u64>,
    counter: u64,
    horizon: u64,
    in_flight: u64,
    active: usize,
}

impl SimState {
    pub fn threads(&self) -> usize {
        self.threads.len()
    }

    pub fn phase(&self, thread: usize) -> Phase {
        self.threads[thread].phase
    }

    pub fn is_done(&self, thread: usize) -> bool {
        self.threads[thread].phase == Phase::Done
    }

    /// Thread is inside an iteration (claimed, not yet fully applied).
    pub fn in_flight(&self, thread: usize) -> bool {
        !matches!(self.threads[thread].phase, Phase::Claim | Phase::Done)
    }

    /// Interval contention accumulated so far by the thread's current
    /// iteration.
    pub fn rho(&self, thread: usize) -> u64 {
        self.threads[thread].rho
    }

    pub fn completed(&self, thread: usize) -> u64 {
        self.threads[thread].completed
    }

    /// Gradient drawn by the thread's current iteration (valid once the
    /// thread is in an `Add` phase).
    pub fn pending_gradient(&self, thread: usize) -> &[f64] {
        &self.threads[thread].gradient
    }

    pub fn model(&self) -> &[f64] {
        &self.cells
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    /// A claim step by any thread would start a new iteration.
    pub fn claim_starts_iteration(&self) -> bool {
        self.counter < self.horizon
    }

    /// Starting one more iteration keeps every interval contention
    /// `≤ limit`.
    pub fn can_start_within(&self, limit: u64) -> bool {
        self.in_flight <= limit
            && (0..self.threads.len()).all(|t| !self.in_flight(t) || self.threads[t].rho < limit)
    }
}

trait Scheduler {
    fn pick(&mut self, state: &SimState) -> Result<usize, SimError>;
}

struct SequentialScheduler;

impl Scheduler for SequentialScheduler {
    fn pick(&mut self, s: &SimState) -> Result<usize, SimError> {
        (0..s.threads())
            .find(|&t| s.in_flight(t))
            .or_else(|| (0..s.threads()).find(|&t| !s.is_done(t)))
            .ok_or_else(|| SimError::IllegalSchedule("no runnable thread".into()))
    }
}

struct RoundRobinScheduler {
    cursor: usize,
}

impl Scheduler for RoundRobinScheduler {
    fn pick(&mut self, s: &SimState) -> Result<usize, SimError> {
        let n = s.threads();
        let t = (0..n)
            .map(|k| (self.cursor + k) % n)
            .find(|&t| !s.is_done(t))
            .ok_or_else(|| SimError::IllegalSchedule("no runnable thread".into()))?;
        self.cursor = (t + 1) % n;
        Ok(t)
    }
}

struct UniformScheduler {
    rng: ChaCha8Rng,
    buf: Vec<usize>,
}

impl Scheduler for UniformScheduler {
    fn pick(&mut self, s: &SimState) -> Result<usize, SimError> {
        self.buf.clear();
        self.buf.extend((0..s.threads()).filter(|&t| !s.is_done(t)));
        if self.buf.is_empty() {
            return Err(SimError::IllegalSchedule("no runnable thread".into()));
        }
        Ok(self.buf[self.rng.random_range(0..self.buf.len())])
    }
}

struct BoundedDelayScheduler {
    tau_max: u64,
    rng: ChaCha8Rng,
    /// Stalled thread and the contention its iteration must reach before
    /// release.
    victim: Option<(usize, u64)>,
    buf: Vec<usize>,
}

impl BoundedDelayScheduler {
    const STALL_PROBABILITY: f64 = 0.05;
}

impl Scheduler for BoundedDelayScheduler {
    fn pick(&mut self, s: &SimState) -> Result<usize, SimError> {
        if let Some((v, target)) = self.victim {
            if s.phase(v) != Phase::Add(0) || s.rho(v) >= target {
                self.victim = None;
            }
        }
        if self.victim.is_none() && self.tau_max > 0 && self.rng.random_bool(Self::STALL_PROBABILITY) {
            self.buf.clear();
            self.buf
                .extend((0..s.threads()).filter(|&t| s.phase(t) == Phase::Add(0)));
            if !self.buf.is_empty() {
                let v = self.buf[self.rng.random_range(0..self.buf.len())];
                let target = self.rng.random_range(1..=self.tau_max);
                self.victim = Some((v, target));
            }
        }
        let may_claim = !s.claim_starts_iteration() || s.can_start_within(self.tau_max);
        let victim = self.victim.map(|(v, _)| v);
        self.buf.clear();
        self.buf.extend((0..s.threads()).filter(|&t| {
            !s.is_done(t) && Some(t) != victim && (s.phase(t) != Phase::Claim || may_claim)
        }));
        if self.buf.is_empty() {
            if let Some(v) = victim {
                self.victim = None;
                return Ok(v);
            }
            return Err(SimError::IllegalSchedule(
                "bounded delay: no thread can move without exceeding τ_max".into(),
            ));
        }
        Ok(self.buf[self.rng.random_range(0..self.buf.len())])
    }
}

#[derive(Debug, Clone, Copy)]
enum ReplayStage {
    Stale,
    Advance { until: u64 },
    Merge,
}

struct StaleReplayScheduler {
    tau: u64,
    stage: ReplayStage,
}

impl Scheduler for StaleReplayScheduler {
    fn pick(&mut self, s: &SimState) -> Result<usize, SimError> {
        const FRESH: usize = 0;
        const STALE: usize = 1;
        for _ in 0..8 {
            match self.stage {
                ReplayStage::Stale => {
                    if s.is_done(STALE) {
                        self.stage = ReplayStage::Advance { until: u64::MAX };
                    } else if s.phase(STALE) == Phase::Add(0) {
                        self.stage = ReplayStage::Advance {
                            until: s.completed(FRESH) + self.tau,
                        };
                    } else {
                        return Ok(STALE);
                    }
                }
                ReplayStage::Advance { until } => {
                    if s.is_done(FRESH) || s.completed(FRESH) >= until {
                        self.stage = ReplayStage::Merge;
                    } else {
                        return Ok(FRESH);
                    }
                }
                ReplayStage::Merge => {
                    if s.is_done(STALE) || s.phase(STALE) == Phase::Claim {
                        self.stage = ReplayStage::Stale;
                    } else {
                        return Ok(STALE);
                    }
                }
            }
        }
        Err(SimError::IllegalSchedule("stale replay: no runnable thread".into()))
    }
}

struct ScriptedScheduler {
    script: Vec<u32>,
    next: usize,
}

impl Scheduler for ScriptedScheduler {
    fn pick(&mut self, _: &SimState) -> Result<usize, SimError> {
        let t = self.script.get(self.next).copied().ok_or_else(|| {
            SimError::IllegalSchedule(format!("script exhausted after {} steps", self.next))
        })?;
        self.next += 1;
        Ok(t as usize)
    }
}

fn scheduler_for(strategy: &Strategy, threads: usize) -> Result<Box<dyn Scheduler>, SimError> {
    Ok(match strategy {
        Strategy::Sequential => Box::new(SequentialScheduler),
        Strategy::RoundRobin => Box::new(RoundRobinScheduler { cursor: 0 }),
        Strategy::UniformRandom { seed } => Box::new(UniformScheduler {
            rng: ChaCha8Rng::seed_from_u64(*seed),
            buf: Vec::with_capacity(threads),
        }),
        Strategy::BoundedDelay { tau_max, seed } => Box::new(BoundedDelayScheduler {
            tau_max: *tau_max,
            rng: ChaCha8Rng::seed_from_u64(*seed),
            victim: None,
            buf: Vec::with_capacity(threads),
        }),
        Strategy::StaleReplay { tau } => {
            if *tau == 0 {
                return Err(SimError::InvalidStrategy("stale replay needs τ ≥ 1".into()));
            }
            if threads != 2 {
                return Err(SimError::InvalidStrategy(format!(
                    "stale replay is defined for exactly 2 threads, got {threads}"
                )));
            }
            Box::new(StaleReplayScheduler {
                tau: *tau,
                stage: ReplayStage::Stale,
            })
        }
        Strategy::Scripted(script) => Box::new(ScriptedScheduler {
            script: script.clone(),
            next: 0,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimOptions {
    /// Keep the step-level event log in the trace.
    pub record_events: bool,
}

/// Result of one simulated execution.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    /// `trace` inside is `None`; the trace is kept alongside.
    pub run: RunResult,
    pub stats: ContentionStats,
    pub trace: ScheduleTrace,
}

impl SimOutcome {
    /// SHA-256 of the schedule and everything it produced.
    pub fn trace_hash(&self) -> String {
        self.trace.hash()
    }
}

/// Executes the SGD loop of `cfg.threads` simulated threads under
/// `strategy`, starting from `x0`.
pub fn simulate(
    spec: &ProblemSpec,
    x0: &[f64],
    cfg: &EpochConfig,
    strategy: &Strategy,
    opts: SimOptions,
) -> Result<SimOutcome, SimError> {
    cfg.validate()
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let d = spec.dim;
    if x0.len() != d {
        return Err(SimError::InvalidConfig(format!(
            "x0 has {} entries, problem has {d}",
            x0.len()
        )));
    }
    let n = cfg.threads;
    let mut scheduler = scheduler_for(strategy, n)?;
    let mut state = SimState {
        threads: (0..n)
            .map(|t| SimThread {
                phase: Phase::Claim,
                rng: thread_stream(cfg.seed, t),
                view: vec![0.0; d],
                versions: vec![0; d],
                gradient: vec![0.0; d],
                current: usize::MAX,
                rho: 0,
                completed: 0,
                local_step: 0,
            })
            .collect(),
        cells: x0.to_vec(),
        counts: vec![0; d],
        counter: 0,
        horizon: cfg.iterations,
        in_flight: 0,
        active: n,
    };
    let mut records: Vec<IterationRecord> = Vec::with_capacity(cfg.iterations.min(1 << 20) as usize);
    let mut events = Vec::new();
    let mut choices = Vec::new();
    let mut next_index = 0u64;
    let mut rank = 0u64;
    let alpha = cfg.alpha;

    while state.active > 0 {
        let tid = scheduler.pick(&state)?;
        if tid >= n || state.is_done(tid) {
            return Err(SimError::IllegalSchedule(format!(
                "step {} scheduled thread {tid}, which is not runnable",
                rank + 1
            )));
        }
        rank += 1;
        choices.push(tid as u32);
        let phase = state.threads[tid].phase;
        let local_step = state.threads[tid].local_step;
        let kind = match phase {
            Phase::Claim => {
                let value = state.counter;
                state.counter += 1;
                if value >= cfg.iterations {
                    state.threads[tid].phase = Phase::Done;
                    state.active -= 1;
                } else {
                    for t in 0..n {
                        if state.in_flight(t) {
                            state.threads[t].rho += 1;
                        }
                    }
                    let th = &mut state.threads[tid];
                    th.rho = state.in_flight;
                    th.current = records.len();
                    th.phase = Phase::Read(0);
                    th.local_step = 0;
                    state.in_flight += 1;
                    records.push(IterationRecord {
                        index: u64::MAX,
                        thread: tid,
                        start_event: rank,
                        first_add_event: 0,
                        end_event: 0,
                        view: Vec::new(),
                        view_versions: Vec::new(),
                        gradient: Vec::new(),
                        add_positions: vec![None; d],
                        epoch: 0,
                    });
                }
                EventKind::CounterFaa { value }
            }
            Phase::Read(j) => {
                let th = &mut state.threads[tid];
                th.view[j] = state.cells[j];
                th.versions[j] = state.counts[j];
                th.phase = if j + 1 < d { Phase::Read(j + 1) } else { Phase::Compute };
                EventKind::Read {
                    index: j,
                    value: state.cells[j],
                }
            }
            Phase::Compute => {
                let th = &mut state.threads[tid];
                let SimThread {
                    rng, view, gradient, ..
                } = th;
                spec.gradient_into(view, rng, gradient);
                th.phase = Phase::Add(0);
                EventKind::LocalCompute
            }
            Phase::Add(j) => {
                let th = &mut state.threads[tid];
                let delta = -alpha * th.gradient[j];
                state.cells[j] += delta;
                let position = state.counts[j];
                state.counts[j] += 1;
                let rec = &mut records[th.current];
                rec.add_positions[j] = Some(position);
                if j == 0 {
                    rec.index = next_index;
                    rec.first_add_event = rank;
                    next_index += 1;
                }
                match (j + 1..d).find(|&k| th.gradient[k] != 0.0) {
                    Some(k) => th.phase = Phase::Add(k),
                    None => {
                        rec.end_event = rank;
                        rec.view = th.view.clone();
                        rec.view_versions = th.versions.clone();
                        rec.gradient = th.gradient.clone();
                        th.phase = Phase::Claim;
                        th.completed += 1;
                        state.in_flight -= 1;
                    }
                }
                EventKind::Add { index: j, delta }
            }
            Phase::Done => unreachable!("checked above"),
        };
        state.threads[tid].local_step = local_step + 1;
        if opts.record_events {
            events.push(SimEvent {
                rank,
                thread: tid,
                kind,
                local_step,
            });
        }
    }

    records.sort_by_key(|r| r.index);
    let mut acc = Accumulator::new(x0, alpha, &spec.x_star, cfg.epsilon);
    for r in &records {
        acc.push(&r.gradient);
    }
    let trace = ScheduleTrace {
        threads: n,
        dim: d,
        alpha,
        x0: x0.to_vec(),
        iterations: records,
        events,
        choices,
    };
    let stats = trace.contention_stats();
    let run = RunResult {
        hit_time: acc.hit_time,
        iterations: trace.len() as u64,
        final_model: state.cells,
        final_dist_sq: acc.dist_sq(),
        final_accumulator: acc.x,
        trace: None,
        contention: None,
        warnings: vec![],
    };
    Ok(SimOutcome {
        run,
        stats,
        trace,
    })
}

const REPLAY_MAGIC: &[u8; 8] = b"ASGDRPLY";
const REPLAY_VERSION: u16 = 1;

/// Compact binary record of a simulated schedule.
///
/// Layout (little endian): magic `ASGDRPLY`, `u16` version, `u64` gradient
/// seed, strategy (`u8` tag, `u64` parameter, `u64` strategy seed), `u32`
/// threads, `u64` iterations, `f64` alpha, `u64` choice count, then one
/// `u16` thread id per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayFile {
    pub seed: u64,
    pub strategy: Strategy,
    pub threads: u32,
    pub iterations: u64,
    pub alpha: f64,
    pub choices: Vec<u16>,
}

impl ReplayFile {
    pub fn from_outcome(cfg: &EpochConfig, strategy: &Strategy, outcome: &SimOutcome) -> Self {
        ReplayFile {
            seed: cfg.seed,
            strategy: strategy.clone(),
            threads: cfg.threads as u32,
            iterations: cfg.iterations,
            alpha: cfg.alpha,
            choices: outcome.trace.choices.iter().map(|&c| c as u16).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (tag, param, sseed) = match &self.strategy {
            Strategy::Sequential => (0u8, 0u64, 0u64),
            Strategy::RoundRobin => (1, 0, 0),
            Strategy::UniformRandom { seed } => (2, 0, *seed),
            Strategy::BoundedDelay { tau_max, seed } => (3, *tau_max, *seed),
            Strategy::StaleReplay { tau } => (4, *tau, 0),
            Strategy::Scripted(_) => (5, 0, 0),
        };
        let mut out = Vec::with_capacity(64 + 2 * self.choices.len());
        out.extend_from_slice(REPLAY_MAGIC);
        out.extend_from_slice(&REPLAY_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.push(tag);
        out.extend_from_slice(&param.to_le_bytes());
        out.extend_from_slice(&sseed.to_le_bytes());
        out.extend_from_slice(&self.threads.to_le_bytes());
        out.extend_from_slice(&self.iterations.to_le_bytes());
        out.extend_from_slice(&self.alpha.to_bits().to_le_bytes());
        out.extend_from_slice(&(self.choices.len() as u64).to_le_bytes());
        for c in &self.choices {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SimError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != REPLAY_MAGIC {
            return Err(SimError::Replay("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != REPLAY_VERSION {
            return Err(SimError::Replay(format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let tag = r.take(1)?[0];
        let param = r.u64()?;
        let sseed = r.u64()?;
        let threads = u32::from_le_bytes(r.array()?);
        let iterations = r.u64()?;
        let alpha = f64::from_bits(r.u64()?);
        let count = r.u64()? as usize;
        let body = r.take(count.checked_mul(2).ok_or_else(|| SimError::Replay("length overflow".into()))?)?;
        let choices: Vec<u16> = body
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        if r.pos != bytes.len() {
            return Err(SimError::Replay("trailing bytes".into()));
        }
        let strategy = match tag {
            0 => Strategy::Sequential,
            1 => Strategy::RoundRobin,
            2 => Strategy::UniformRandom { seed: sseed },
            3 => Strategy::BoundedDelay {
                tau_max: param,
                seed: sseed,
            },
            4 => Strategy::StaleReplay { tau: param },
            5 => Strategy::Scripted(choices.iter().map(|&c| u32::from(c)).collect()),
            other => return Err(SimError::Replay(format!("unknown strategy tag {other}"))),
        };
        Ok(ReplayFile {
            seed,
            strategy,
            threads,
            iterations,
            alpha,
            choices,
        })
    }

    /// Re-executes the recorded schedule.
    pub fn replay(
        &self,
        spec: &ProblemSpec,
        x0: &[f64],
        epsilon: f64,
        opts: SimOptions,
    ) -> Result<SimOutcome, SimError> {
        let cfg = EpochConfig {
            iterations: self.iterations,
            alpha: self.alpha,
            threads: self.threads as usize,
            epsilon,
            seed: self.seed,
            trace: true,
        };
        let script = Strategy::Scripted(self.choices.iter().map(|&c| u32::from(c)).collect());
        simulate(spec, x0, &cfg, &script, opts)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], SimError> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SimError::Replay("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], SimError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64, SimError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
