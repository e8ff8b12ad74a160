//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Recognised keys:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `problem.kind` | `quadratic` | `quadratic` or `regression` |
//! | `problem.d` | `1` | dimension of the quadratic |
//! | `problem.sigma` | `0` | gradient noise of the quadratic |
//! | `problem.data_path` | | CSV dataset for regression |
//! | `problem.ridge` | `0` | ridge penalty for regression |
//! | `problem.radius` | `10` | radius of the box the constants hold on |
//! | `problem.x0` | `x* + 1/√d` per entry | comma-separated start point |
//! | `run.threads` | `1` | worker threads |
//! | `run.T` | `1000` | iterations per epoch |
//! | `run.alpha` | `auto` | step size; `auto` uses the tuned asynchronous rate |
//! | `run.epsilon` | `0.01` | success radius (squared distance) |
//! | `run.theta` | `1` | step-size safety factor in `(0, 1]` |
//! | `run.seed` | `0` | base seed |
//! | `run.trace` | `off` | record a per-iteration trace |
//! | `sim.strategy` | `sequential` | scheduler, see [`parse_strategy`] |
//! | `sim.tau` | `2` | delay of the stale-replay adversary |
//! | `sim.tau_max` | `run.threads` | contention cap of bounded-delay; also the `τ_max` of `auto` |
//! | `sim.seed` | `run.seed` | scheduler seed |

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::engine::EpochConfig;
use crate::problems::{dist_sq, quadratic_problem, regression_problem, Dataset, ProblemError, ProblemSpec};
use crate::sim::Strategy;
use crate::theory::{tuned_learning_rate, BoundParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("`{key}` = `{value}`: {message}")]
    Invalid {
        key: String,
        value: String,
        message: String,
    },
    #[error("`{0}` is required")]
    Missing(&'static str),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

const KNOWN_KEYS: &[&str] = &[
    "problem.kind",
    "problem.d",
    "problem.sigma",
    "problem.data_path",
    "problem.ridge",
    "problem.radius",
    "problem.x0",
    "run.threads",
    "run.T",
    "run.alpha",
    "run.epsilon",
    "run.theta",
    "run.seed",
    "run.trace",
    "sim.strategy",
    "sim.tau",
    "sim.tau_max",
    "sim.seed",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Config { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Sets a key, as if it had appeared in the file.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Snapshot of all explicitly set keys.
    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| invalid(key, v, e.to_string())),
        }
    }

    pub fn problem(&self) -> Result<ProblemSpec, ConfigError> {
        let spec = match self.get("problem.kind").unwrap_or("quadratic") {
            "quadratic" => {
                let d = self.parsed("problem.d", 1usize)?;
                let sigma = self.parsed("problem.sigma", 0.0f64)?;
                quadratic_problem(d, sigma)?
            }
            "regression" => {
                let path = self
                    .get("problem.data_path")
                    .ok_or(ConfigError::Missing("problem.data_path"))?;
                let data = Dataset::from_csv(path)?;
                regression_problem(&data, self.parsed("problem.ridge", 0.0f64)?)?
            }
            other => {
                return Err(invalid("problem.kind", other, "expected quadratic or regression"))
            }
        };
        match self.get("problem.radius") {
            None => Ok(spec),
            Some(_) => Ok(spec.with_radius(self.parsed("problem.radius", 0.0f64)?)?),
        }
    }

    /// Starting point; defaults to unit distance from the minimizer.
    pub fn x0(&self, spec: &ProblemSpec) -> Result<Vec<f64>, ConfigError> {
        match self.get("problem.x0") {
            None => {
                let shift = 1.0 / (spec.dim as f64).sqrt();
                Ok(spec.x_star.iter().map(|v| v + shift).collect())
            }
            Some(raw) => {
                let x0 = raw
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| invalid("problem.x0", raw, e.to_string()))?;
                if x0.len() != spec.dim {
                    return Err(invalid(
                        "problem.x0",
                        raw,
                        format!("expected {} entries, got {}", spec.dim, x0.len()),
                    ));
                }
                if x0.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("problem.x0", raw, "entries must be finite"));
                }
                Ok(x0)
            }
        }
    }

    pub fn threads(&self) -> Result<usize, ConfigError> {
        let n = self.parsed("run.threads", 1usize)?;
        if n == 0 {
            return Err(invalid("run.threads", "0", "need at least one thread"));
        }
        Ok(n)
    }

    pub fn tau_max(&self) -> Result<u64, ConfigError> {
        let n = self.threads()? as u64;
        self.parsed("sim.tau_max", n)
    }

    pub fn epsilon(&self) -> Result<f64, ConfigError> {
        let eps = self.parsed("run.epsilon", 0.01f64)?;
        if !(eps.is_finite() && eps > 0.0) {
            return Err(invalid("run.epsilon", &eps.to_string(), "must be positive"));
        }
        Ok(eps)
    }

    pub fn theta(&self) -> Result<f64, ConfigError> {
        let theta = self.parsed("run.theta", 1.0f64)?;
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(invalid("run.theta", &theta.to_string(), "must lie in (0, 1]"));
        }
        Ok(theta)
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.parsed("run.seed", 0u64)
    }

    pub fn trace(&self) -> Result<bool, ConfigError> {
        match self.get("run.trace").unwrap_or("off") {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            other => Err(invalid("run.trace", other, "expected on or off")),
        }
    }

    /// Bound parameters for `spec` started at `x0`; the step size is
    /// `run.alpha` if numeric and the tuned rate otherwise.
    pub fn bound_params(&self, spec: &ProblemSpec, x0: &[f64]) -> Result<BoundParams, ConfigError> {
        let p = BoundParams::for_problem(
            spec,
            self.threads()?,
            self.tau_max()?,
            self.epsilon()?,
            self.theta()?,
            dist_sq(x0, &spec.x_star),
            self.parsed("run.T", 1000u64)?,
        );
        let alpha = match self.get("run.alpha").unwrap_or("auto") {
            "auto" => tuned_learning_rate(&p),
            raw => {
                let a: f64 = raw.parse().map_err(|e: std::num::ParseFloatError| {
                    invalid("run.alpha", raw, e.to_string())
                })?;
                if !(a.is_finite() && a > 0.0) {
                    return Err(invalid("run.alpha", raw, "must be positive"));
                }
                a
            }
        };
        Ok(p.with_alpha(alpha))
    }

    pub fn epoch_config(&self, spec: &ProblemSpec, x0: &[f64]) -> Result<EpochConfig, ConfigError> {
        let p = self.bound_params(spec, x0)?;
        Ok(EpochConfig {
            iterations: p.horizon,
            alpha: p.alpha,
            threads: p.n,
            epsilon: p.epsilon,
            seed: self.seed()?,
            trace: self.trace()?,
        })
    }

    /// Scheduler from `sim.*`, or from `name` when given.
    pub fn strategy(&self, name: Option<&str>) -> Result<Strategy, ConfigError> {
        let name = name.or(self.get("sim.strategy")).unwrap_or("sequential");
        let seed = self.parsed("sim.seed", self.seed()?)?;
        let tau = self.parsed("sim.tau", 2u64)?;
        parse_strategy(name, tau, self.tau_max()?, seed)
    }
}

/// Strategy names: `sequential`, `round-robin`, `uniform`,
/// `bounded-delay`, `stale-replay`.
pub fn parse_strategy(name: &str, tau: u64, tau_max: u64, seed: u64) -> Result<Strategy, ConfigError> {
    Ok(match name {
        "sequential" => Strategy::Sequential,
        "round-robin" | "roundrobin" => Strategy::RoundRobin,
        "uniform" | "uniform-random" => Strategy::UniformRandom { seed },
        "bounded-delay" => Strategy::BoundedDelay { tau_max, seed },
        "stale-replay" => {
            if tau == 0 {
                return Err(invalid("sim.tau", "0", "stale replay needs τ ≥ 1"));
            }
            Strategy::StaleReplay { tau }
        }
        other => {
            return Err(invalid(
                "sim.strategy",
                other,
                "expected sequential, round-robin, uniform, bounded-delay or stale-replay",
            ))
        }
    })
}

fn invalid(key: &str, value: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        value: value.to_string(),
        message: message.into(),
    }
}
