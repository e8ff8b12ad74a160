//! Closed-form convergence bounds, step sizes, the lower-bound slowdown,
//! and the rate supermartingale used to verify them.
//!
//! Logarithms are natural throughout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::{dist_sq, GradientOracle, ProblemSpec};
use crate::rng::mix;
use crate::verdict::Verdict;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid step size: 2αcε − α²M² = {0} is not positive")]
    InvalidStepSize(f64),
    #[error("feasibility violated: α²HLMC√d = {0} ≥ 1")]
    Infeasible(f64),
    #[error("horizon T must be positive")]
    ZeroHorizon,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Piecewise logarithm: `ln(e·x)` for `x ≥ 1`, `x` below.
pub fn plog(x: f64) -> f64 {
    if x >= 1.0 {
        1.0 + x.ln()
    } else {
        x
    }
}

/// Constants feeding every bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    /// Strong convexity.
    pub c: f64,
    /// Gradient Lipschitz constant.
    pub l: f64,
    /// Second-moment bound on stochastic gradients.
    pub m: f64,
    pub d: usize,
    pub n: usize,
    pub tau_max: u64,
    pub epsilon: f64,
    pub theta: f64,
    pub alpha: f64,
    /// `‖x_0 − x*‖²`.
    pub x0_dist_sq: f64,
    pub horizon: u64,
}

impl BoundParams {
    /// Parameters for `spec` with the asynchronous tuned step size.
    #[allow(clippy::too_many_arguments)]
    pub fn for_problem(
        spec: &ProblemSpec,
        threads: usize,
        tau_max: u64,
        epsilon: f64,
        theta: f64,
        x0_dist_sq: f64,
        horizon: u64,
    ) -> Self {
        let mut p = BoundParams {
            c: spec.strong_convexity,
            l: spec.lipschitz,
            m: spec.gradient_bound(),
            d: spec.dim,
            n: threads,
            tau_max,
            epsilon,
            theta,
            alpha: 0.0,
            x0_dist_sq,
            horizon,
        };
        p.alpha = tuned_learning_rate(&p);
        p
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_horizon(mut self, horizon: u64) -> Self {
        self.horizon = horizon;
        self
    }

    /// `C = 2√(τ_max·n)`.
    pub fn contention_constant(&self) -> f64 {
        2.0 * ((self.tau_max as f64) * (self.n as f64)).sqrt()
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let positive = [
            ("c", self.c),
            ("L", self.l),
            ("M", self.m),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TheoryError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(TheoryError::InvalidParams(format!(
                "theta must lie in (0, 1], got {}",
                self.theta
            )));
        }
        if self.d == 0 || self.n == 0 {
            return Err(TheoryError::InvalidParams("d and n must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(TheoryError::InvalidParams(format!("alpha = {}", self.alpha)));
        }
        if !(self.x0_dist_sq.is_finite() && self.x0_dist_sq >= 0.0) {
            return Err(TheoryError::InvalidParams(format!(
                "x0 distance = {}",
                self.x0_dist_sq
            )));
        }
        Ok(())
    }

    /// `2αcε − α²M²`.
    pub fn rate_denominator(&self) -> f64 {
        2.0 * self.alpha * self.c * self.epsilon - self.alpha * self.alpha * self.m * self.m
    }

    fn checked_denominator(&self) -> Result<f64, TheoryError> {
        let den = self.rate_denominator();
        if den > 0.0 {
            Ok(den)
        } else {
            Err(TheoryError::InvalidStepSize(den))
        }
    }
}

/// `W_t = ε/(2αcε − α²M²)·plog(dist²/ε) + t` for a process that has not
/// yet succeeded.
pub fn rate_supermartingale_w(p: &BoundParams, dist_sq: f64, t: u64) -> Result<f64, TheoryError> {
    let den = p.checked_denominator()?;
    Ok(p.epsilon / den * plog(dist_sq / p.epsilon) + t as f64)
}

/// Lipschitz constant of `W_t` in the current iterate, `2√ε/(2αcε − α²M²)`.
pub fn lipschitz_h(p: &BoundParams) -> Result<f64, TheoryError> {
    Ok(2.0 * p.epsilon.sqrt() / p.checked_denominator()?)
}

/// Step size balancing the sequential and asynchronous terms:
/// `cεϑ/(M² + 4√ε·L·M·√(τ_max·n)·√d)`.
pub fn tuned_learning_rate(p: &BoundParams) -> f64 {
    let penalty = 4.0
        * p.epsilon.sqrt()
        * p.l
        * p.m
        * ((p.tau_max as f64) * (p.n as f64)).sqrt()
        * (p.d as f64).sqrt();
    p.c * p.epsilon * p.theta / (p.m * p.m + penalty)
}

/// Sequential step size `cεϑ/M²`.
pub fn sequential_learning_rate(p: &BoundParams) -> f64 {
    p.c * p.epsilon * p.theta / (p.m * p.m)
}

/// Step size of the consistent-read asynchronous analysis,
/// `cεϑ/(M² + 2LMτ√ε)`.
pub fn consistent_read_learning_rate(p: &BoundParams) -> f64 {
    p.c * p.epsilon * p.theta
        / (p.m * p.m + 2.0 * p.l * p.m * p.tau_max as f64 * p.epsilon.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundVariant {
    /// Sequential SGD at the sequential step size.
    Sequential,
    /// Asynchronous SGD with consistent reads.
    ConsistentRead,
    /// Lock-free SGD at the tuned step size.
    LockFreeTuned,
    /// Lock-free SGD for a general step size via `W_0`.
    LockFreeGeneric,
}

impl BoundVariant {
    pub const ALL: [BoundVariant; 4] = [
        BoundVariant::Sequential,
        BoundVariant::ConsistentRead,
        BoundVariant::LockFreeTuned,
        BoundVariant::LockFreeGeneric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundVariant::Sequential => "sequential",
            BoundVariant::ConsistentRead => "consistent-read",
            BoundVariant::LockFreeTuned => "lock-free-tuned",
            BoundVariant::LockFreeGeneric => "lock-free-generic",
        }
    }

    pub fn needs_feasibility(self) -> bool {
        matches!(self, BoundVariant::LockFreeTuned | BoundVariant::LockFreeGeneric)
    }
}

/// A failure-probability bound, raw and clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub raw: f64,
    pub clamped: f64,
}

impl BoundValue {
    fn new(raw: f64) -> Self {
        BoundValue {
            raw,
            clamped: raw.clamp(0.0, 1.0),
        }
    }

    /// The bound says nothing (it is at least 1).
    pub fn is_vacuous(&self) -> bool {
        self.raw >= 1.0
    }
}

/// Upper bound on the probability that no iterate enters the success
/// region within the horizon.
pub fn failure_prob_bound(p: &BoundParams, variant: BoundVariant) -> Result<BoundValue, TheoryError> {
    p.validate()?;
    if p.horizon == 0 {
        return Err(TheoryError::ZeroHorizon);
    }
    if variant.needs_feasibility() {
        let f = feasibility_check(p)?;
        if !f.feasible {
            return Err(TheoryError::Infeasible(f.value));
        }
    }
    let t = p.horizon as f64;
    let scale = p.c * p.c * p.epsilon * p.theta * t;
    let log_term = plog(std::f64::consts::E * p.x0_dist_sq / p.epsilon);
    let m2 = p.m * p.m;
    let raw = match variant {
        BoundVariant::Sequential => m2 / scale * log_term,
        BoundVariant::ConsistentRead => {
            (m2 + 2.0 * p.l * p.m * p.tau_max as f64 * p.epsilon.sqrt()) / scale * log_term
        }
        BoundVariant::LockFreeTuned => {
            let penalty = 4.0
                * p.epsilon.sqrt()
                * p.l
                * p.m
                * ((p.tau_max as f64) * (p.n as f64)).sqrt()
                * (p.d as f64).sqrt();
            (m2 + penalty) / scale * log_term
        }
        BoundVariant::LockFreeGeneric => {
            let w0 = rate_supermartingale_w(p, p.x0_dist_sq, 0)?;
            let f = feasibility_value(p)?;
            w0 / ((1.0 - f) * t)
        }
    };
    Ok(BoundValue::new(raw))
}

/// Every variant for the given parameters, in [`BoundVariant::ALL`] order.
pub fn all_bounds(p: &BoundParams) -> Vec<(BoundVariant, Result<BoundValue, TheoryError>)> {
    BoundVariant::ALL
        .iter()
        .map(|&v| (v, failure_prob_bound(p, v)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    /// `α²·H·L·M·C·√d`.
    pub value: f64,
    /// `1 − value`.
    pub margin: f64,
}

fn feasibility_value(p: &BoundParams) -> Result<f64, TheoryError> {
    if p.tau_max == 0 {
        return Ok(0.0);
    }
    let h = lipschitz_h(p)?;
    Ok(p.alpha * p.alpha * h * p.l * p.m * p.contention_constant() * (p.d as f64).sqrt())
}

/// Whether `α²·H·L·M·2√(τ_max·n)·√d < 1`.
pub fn feasibility_check(p: &BoundParams) -> Result<Feasibility, TheoryError> {
    let value = feasibility_value(p)?;
    Ok(Feasibility {
        feasible: value < 1.0,
        value,
        margin: 1.0 - value,
    })
}

fn check_unit_alpha(alpha: f64) -> Result<(), TheoryError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(TheoryError::InvalidParams(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Slowdown of the stale-gradient adversary relative to sequential SGD,
/// `τ·ln(1−α)/(ln α − ln 2)`.
pub fn lower_bound_slowdown(alpha: f64, tau: u64) -> Result<f64, TheoryError> {
    check_unit_alpha(alpha)?;
    if tau == 0 {
        return Err(TheoryError::InvalidParams("tau must be at least 1".into()));
    }
    Ok(tau as f64 * (1.0 - alpha).ln() / (alpha.ln() - 2f64.ln()))
}

/// Smallest `τ` with `2(1−α)^τ ≤ α`, from which the adversary halves the
/// sequential contraction.
pub fn minimal_adversary_tau(alpha: f64) -> Result<u64, TheoryError> {
    check_unit_alpha(alpha)?;
    let mut tau = 1u64;
    while 2.0 * (1.0 - alpha).powi(tau as i32) > alpha {
        tau += 1;
    }
    Ok(tau)
}

/// Variance of the accumulated noise in one adversarial round,
/// `α²σ²(1 + (1 − (1−α)^{2τ})/(1 − (1−α)²))`.
pub fn stale_variance_closed_form(alpha: f64, sigma: f64, tau: u64) -> Result<f64, TheoryError> {
    check_unit_alpha(alpha)?;
    let q = (1.0 - alpha) * (1.0 - alpha);
    let geometric = (1.0 - q.powi(tau as i32)) / (1.0 - q);
    Ok(alpha * alpha * sigma * sigma * (1.0 + geometric))
}

/// Rate supermartingale of one sequential run, with the freeze rule:
/// once an iterate enters the success region, `W` stops changing.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleState {
    pub t: u64,
    pub w: f64,
    pub dist_sq: f64,
    /// First index whose iterate was in the success region.
    pub succeeded_at: Option<u64>,
}

impl MartingaleState {
    pub fn start(p: &BoundParams, dist_sq: f64) -> Result<Self, TheoryError> {
        Ok(MartingaleState {
            t: 0,
            w: rate_supermartingale_w(p, dist_sq, 0)?,
            dist_sq,
            succeeded_at: (dist_sq <= p.epsilon).then_some(0),
        })
    }

    /// State at `t + 1` for the next iterate's squared distance.
    pub fn advance(&self, p: &BoundParams, next_dist_sq: f64) -> Result<Self, TheoryError> {
        let t = self.t + 1;
        if self.succeeded_at.is_some() {
            return Ok(MartingaleState {
                t,
                dist_sq: next_dist_sq,
                ..self.clone()
            });
        }
        if next_dist_sq <= p.epsilon {
            return Ok(MartingaleState {
                t,
                w: self.w,
                dist_sq: next_dist_sq,
                succeeded_at: Some(t),
            });
        }
        Ok(MartingaleState {
            t,
            w: rate_supermartingale_w(p, next_dist_sq, t)?,
            dist_sq: next_dist_sq,
            succeeded_at: None,
        })
    }
}

/// Monte-Carlo check that one sequential SGD step does not increase `W`
/// in expectation, from each of `states`.
///
/// For a state outside the success region the `samples` one-step values
/// of `W_{t+1}` must have mean `≤ W_t + 4·stderr`. States inside the region
/// are frozen and must reproduce `W_t` exactly.
pub fn check_supermartingale(
    spec: &ProblemSpec,
    p: &BoundParams,
    states: &[Vec<f64>],
    samples: usize,
    seed: u64,
) -> Result<Verdict, TheoryError> {
    p.checked_denominator()?;
    let mut verdict = Verdict::new(
        "rate supermartingale",
        format!("one-step mean of W ≤ W_t + 4·stderr over {samples} samples per state"),
    );
    let mut gradient = vec![0.0; spec.dim];
    let mut next = vec![0.0; spec.dim];
    for (i, x) in states.iter().enumerate() {
        let state = MartingaleState::start(p, dist_sq(x, &spec.x_star))?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut frozen_exact = true;
        for _ in 0..samples {
            spec.gradient_into(x, &mut rng, &mut gradient);
            for ((nx, xv), g) in next.iter_mut().zip(x).zip(&gradient) {
                *nx = xv - p.alpha * g;
            }
            let w = state.advance(p, dist_sq(&next, &spec.x_star))?.w;
            if state.succeeded_at.is_some() && w != state.w {
                frozen_exact = false;
            }
            sum += w;
            sum_sq += w * w;
        }
        let n = samples.max(1) as f64;
        let mean = sum / n;
        let var = if samples > 1 {
            ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        let stderr = (var / n).sqrt();
        let ok = if state.succeeded_at.is_some() {
            frozen_exact
        } else {
            mean <= state.w + 4.0 * stderr
        };
        verdict.record(ok, || {
            format!(
                "state {i}: W_t = {}, mean W_(t+1) = {mean}, stderr = {stderr}",
                state.w
            )
        });
    }
    Ok(verdict)
}

/// The asynchronous correction of `W` evaluated after the fact on a full
/// run: `V_t = W_t − α²HLMC√d·t + αHL√d·Σ_k ‖x_{t−k+1} − x_{t−k}‖·Σ_{m≥k} 1{τ_{t−k+m} ≥ m}`,
/// frozen at `V_{u−1}` once `x_u` is in the success region.
///
/// `xs` holds the accumulators `x_0..=x_T` and `tau` the delays
/// `τ_0..τ_{T−1}`.
pub fn post_hoc_v(
    p: &BoundParams,
    xs: &[Vec<f64>],
    tau: &[u64],
    x_star: &[f64],
) -> Result<Vec<f64>, TheoryError> {
    if xs.is_empty() {
        return Ok(vec![]);
    }
    let h = lipschitz_h(p)?;
    let drift = feasibility_value(p)?;
    let sqrt_d = (p.d as f64).sqrt();
    let steps: Vec<f64> = xs.windows(2).map(|w| dist_sq(&w[1], &w[0]).sqrt()).collect();
    let max_tau = tau.iter().copied().max().unwrap_or(0) as usize;
    let mut values = Vec::with_capacity(xs.len());
    let mut frozen: Option<f64> = None;
    for (t, x) in xs.iter().enumerate() {
        if let Some(v) = frozen {
            values.push(v);
            continue;
        }
        let dist = dist_sq(x, x_star);
        if dist <= p.epsilon && t > 0 {
            let v = values[t - 1];
            frozen = Some(v);
            values.push(v);
            continue;
        }
        let mut correction = 0.0;
        for k in 1..=t.min(max_tau) {
            // Σ_{m≥k} 1{τ_{t−k+m} ≥ m}: with s = t−k+m, count s ≥ t with τ_s ≥ s−t+k.
            let count = (t..tau.len().min(t + max_tau + 1))
                .filter(|&s| tau[s] as usize >= s - t + k)
                .count();
            correction += steps[t - k] * count as f64;
        }
        let w = rate_supermartingale_w(p, dist, t as u64)?;
        let v = w - drift * t as f64 + p.alpha * h * p.l * sqrt_d * correction;
        if dist <= p.epsilon {
            frozen = Some(v);
        }
        values.push(v);
    }
    Ok(values)
}

/// Checks `V_T ≥ 0` and `V_0 = W_0` on a completed run.
pub fn check_post_hoc_v(
    p: &BoundParams,
    xs: &[Vec<f64>],
    tau: &[u64],
    x_star: &[f64],
) -> Result<Verdict, TheoryError> {
    let values = post_hoc_v(p, xs, tau, x_star)?;
    let mut verdict = Verdict::new("post-hoc V process", "V_T ≥ 0 and V_0 = W_0 exactly");
    if let (Some(&first), Some(&last), Some(x0)) = (values.first(), values.last(), xs.first()) {
        let w0 = rate_supermartingale_w(p, dist_sq(x0, x_star), 0)?;
        verdict.record(first == w0, || format!("V_0 = {first}, W_0 = {w0}"));
        verdict.record(last >= 0.0, || format!("V_T = {last}"));
    }
    Ok(verdict)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_params() -> BoundParams {
        BoundParams {
            c: 1.0,
            l: 1.0,
            m: 1.0,
            d: 1,
            n: 4,
            tau_max: 16,
            epsilon: 0.01,
            theta: 1.0,
            alpha: 0.005,
            x0_dist_sq: 1.0,
            horizon: 100_000,
        }
    }

    #[test]
    fn plog_branches() {
        assert_eq!(plog(1.0), 1.0);
        assert_eq!(plog(0.5), 0.5);
        assert!((plog(std::f64::consts::E) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn w_and_h() {
        let p = unit_params();
        let w = rate_supermartingale_w(&p, 0.01, 0).unwrap();
        assert!((w - 0.01 / 7.5e-5).abs() < 1e-9);
        assert!((lipschitz_h(&p).unwrap() - 0.2 / 7.5e-5).abs() < 1e-9);
        let bad = unit_params().with_alpha(1.0);
        assert!(matches!(rate_supermartingale_w(&bad, 1.0, 0), Err(TheoryError::InvalidStepSize(_))));
    }

    #[test]
    fn tuned_rate_example() {
        let p = unit_params();
        assert!((tuned_learning_rate(&p) - 0.01 / 4.2).abs() < 1e-15);
        let seq = BoundParams { tau_max: 0, ..p.clone() };
        assert_eq!(tuned_learning_rate(&seq), sequential_learning_rate(&seq));
        let half = BoundParams { theta: 0.5, ..seq.clone() };
        assert_eq!(tuned_learning_rate(&half), 0.5 * tuned_learning_rate(&seq));
    }

    #[test]
    fn tuned_bound_example() {
        let p = unit_params();
        let p = p.clone().with_alpha(tuned_learning_rate(&p));
        let b = failure_prob_bound(&p, BoundVariant::LockFreeTuned).unwrap();
        let expected = 4.2 / (0.01 * 1e5) * (2.0 + 100f64.ln());
        assert!((b.raw - expected).abs() < 1e-12);
        assert!(!b.is_vacuous());
    }

    #[test]
    fn feasibility_at_tuned_rate() {
        let p = unit_params();
        let p = p.clone().with_alpha(tuned_learning_rate(&p));
        let f = feasibility_check(&p).unwrap();
        assert!(f.feasible && f.margin > 0.0);
        let big = p.clone().with_alpha(0.019);
        let f = feasibility_check(&big).unwrap();
        assert!(!f.feasible);
        assert!(matches!(failure_prob_bound(&big, BoundVariant::LockFreeGeneric), Err(TheoryError::Infeasible(_))));
        assert!(failure_prob_bound(&big, BoundVariant::Sequential).is_ok());
    }

    #[test]
    fn slowdown_and_threshold() {
        assert!((lower_bound_slowdown(0.5, 2).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(minimal_adversary_tau(0.5).unwrap(), 2);
        assert_eq!(minimal_adversary_tau(0.1).unwrap(), 29);
        assert!(lower_bound_slowdown(1.0, 2).is_err());
        assert!(lower_bound_slowdown(0.5, 0).is_err());
    }

    #[test]
    fn stale_variance_examples() {
        assert_eq!(stale_variance_closed_form(0.3, 0.0, 5).unwrap(), 0.0);
        let v = stale_variance_closed_form(0.3, 2.0, 1).unwrap();
        assert!((v - 2.0 * 0.09 * 4.0).abs() < 1e-12);
        assert!((stale_variance_closed_form(0.5, 1.0, 2).unwrap() - 0.5625).abs() < 1e-12);
    }

    #[test]
    fn freeze_rule() {
        let p = unit_params();
        let s = MartingaleState::start(&p, 1.0).unwrap();
        let s1 = s.advance(&p, 0.001).unwrap();
        assert_eq!(s1.w, s.w);
        assert_eq!(s1.succeeded_at, Some(1));
        let s2 = s1.advance(&p, 5.0).unwrap();
        assert_eq!(s2.w, s.w);
        let fresh = s.advance(&p, 0.5).unwrap();
        assert!(fresh.w >= 1.0);
    }
}
