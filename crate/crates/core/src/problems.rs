//! Convex test objectives with exact constants and unbiased stochastic
//! gradient oracles.
//!
//! Two objectives are provided:
//!
//! * the isotropic quadratic `f(x) = ½‖x‖²` whose oracle returns
//!   `g̃(x) = x − u` with `u ~ N(0, σ² I)`;
//! * ridge least squares over a [`Dataset`], whose oracle returns the
//!   gradient of the loss at one uniformly sampled point.
//!
//! Every problem carries the strong-convexity constant `c`, the
//! expected-Lipschitz constant `L` of the oracle, and a second-moment bound
//! `M²`. The Gaussian oracle has no global second-moment bound, so `M²` is
//! stated over the test box `‖x − x*‖ ≤ R`; bounds derived from it hold
//! for trajectories that stay inside the box.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Default radius of the test box over which `M²` is stated.
pub const DEFAULT_BOX_RADIUS: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("noise level must be finite and nonnegative, got {0}")]
    InvalidSigma(f64),
    #[error("ridge penalty must be finite and nonnegative, got {0}")]
    InvalidRidge(f64),
    #[error("box radius must be finite and positive, got {0}")]
    InvalidRadius(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("point {index} has {found} features, expected {expected}")]
    RaggedDataset {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("unidentifiable minimizer: normal equations are singular")]
    Unidentifiable,
    #[error("view has {found} entries, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("view entry {index} is not finite")]
    NonFiniteView { index: usize },
    #[error("dataset: {0}")]
    Csv(String),
}

/// Loss attached to a dataset. Only squared loss is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Squared,
}

/// Labelled points `(a_i, y_i)` for least-squares regression.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub loss: LossKind,
}

impl Dataset {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self, ProblemError> {
        if points.is_empty() || points.len() != labels.len() {
            return Err(ProblemError::EmptyDataset);
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(ProblemError::ZeroDimension);
        }
        for (index, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(ProblemError::RaggedDataset {
                    index,
                    expected: dim,
                    found: p.len(),
                });
            }
        }
        Ok(Dataset {
            points,
            labels,
            loss: LossKind::Squared,
        })
    }

    /// Reads one point per row, last column is the label. A first row that
    /// does not parse as numbers is treated as a header.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self, ProblemError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path.as_ref())
            .map_err(|e| ProblemError::Csv(e.to_string()))?;
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| ProblemError::Csv(e.to_string()))?;
            let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
            let values = match parsed {
                Ok(v) => v,
                Err(_) if row == 0 => continue,
                Err(e) => return Err(ProblemError::Csv(format!("row {}: {e}", row + 1))),
            };
            if values.len() < 2 {
                return Err(ProblemError::Csv(format!(
                    "row {}: need at least one feature and a label",
                    row + 1
                )));
            }
            let (features, label) = values.split_at(values.len() - 1);
            points.push(features.to_vec());
            labels.push(label[0]);
        }
        Dataset::new(points, labels)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }
}

/// Objective-specific part of a [`ProblemSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Quadratic { sigma: f64 },
    Regression { data: Dataset, ridge: f64 },
}

/// Randomness consumed by one oracle call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngDraw {
    /// `count` standard normals, one per coordinate.
    Gaussian { count: usize },
    /// Sampled data point (0-based).
    Index(usize),
    /// Deterministic oracle, nothing drawn.
    Nothing,
}

/// One stochastic gradient together with the view it was computed at.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub value: Vec<f64>,
    pub source_view: Vec<f64>,
    pub draw: RngDraw,
}

/// A convex objective satisfying strong convexity (`c`), expected
/// Lipschitz continuity of the oracle (`L`) and a second-moment bound
/// (`M²`) over the test box of radius `radius` around `x_star`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub dim: usize,
    pub strong_convexity: f64,
    pub lipschitz: f64,
    pub second_moment: f64,
    pub x_star: Vec<f64>,
    pub radius: f64,
    pub objective: Objective,
}

/// Anything that can produce unbiased stochastic gradients.
///
/// The threaded engine is generic over this trait so tests can inject
/// faulty oracles; [`ProblemSpec`] is the production implementation.
pub trait GradientOracle: Sync {
    fn dim(&self) -> usize;

    fn minimizer(&self) -> &[f64];

    /// Writes `g̃(view)` into `out`. Inputs are assumed validated.
    fn gradient_into<R: Rng + ?Sized>(&self, view: &[f64], rng: &mut R, out: &mut [f64])
        -> RngDraw;
}

/// The quadratic `½‖x‖²` in `d` dimensions with Gaussian gradient noise.
pub fn quadratic_problem(d: usize, sigma: f64) -> Result<ProblemSpec, ProblemError> {
    if d == 0 {
        return Err(ProblemError::ZeroDimension);
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(ProblemError::InvalidSigma(sigma));
    }
    let mut spec = ProblemSpec {
        dim: d,
        strong_convexity: 1.0,
        lipschitz: 1.0,
        second_moment: 0.0,
        x_star: vec![0.0; d],
        radius: DEFAULT_BOX_RADIUS,
        objective: Objective::Quadratic { sigma },
    };
    spec.second_moment = spec.box_second_moment();
    Ok(spec)
}

/// Ridge least squares `f(x) = (1/m) Σ ½(a_iᵀx − y_i)² + (λ/2)‖x‖²`.
///
/// `c` is the smallest eigenvalue of the Hessian `(1/m) Σ a_i a_iᵀ + λI`.
/// `L` is `max_i ‖a_i‖² + λ`, the largest per-sample Hessian norm: the
/// oracle difference `g̃_i(x) − g̃_i(y) = (a_i a_iᵀ + λI)(x − y)` is bounded
/// by it for every draw, whereas the averaged Hessian's top eigenvalue does
/// not bound `E‖g̃(x) − g̃(y)‖` in general.
pub fn regression_problem(data: &Dataset, ridge: f64) -> Result<ProblemSpec, ProblemError> {
    if data.is_empty() {
        return Err(ProblemError::EmptyDataset);
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(ProblemError::InvalidRidge(ridge));
    }
    let d = data.dim();
    if d == 0 {
        return Err(ProblemError::ZeroDimension);
    }
    let m = data.len() as f64;
    let mut hessian = DMatrix::<f64>::identity(d, d) * ridge;
    let mut rhs = DVector::<f64>::zeros(d);
    let mut max_norm_sq = 0.0f64;
    for (a, &y) in data.points.iter().zip(&data.labels) {
        let a = DVector::from_column_slice(a);
        hessian += &a * a.transpose() / m;
        rhs += &a * (y / m);
        max_norm_sq = max_norm_sq.max(a.norm_squared());
    }
    let eig = nalgebra::SymmetricEigen::new(hessian.clone());
    let lambda_min = eig.eigenvalues.min();
    let lambda_max = eig.eigenvalues.max();
    if !(lambda_min > 1e-12 * lambda_max.max(1.0)) {
        return Err(ProblemError::Unidentifiable);
    }
    let x_star = hessian
        .cholesky()
        .ok_or(ProblemError::Unidentifiable)?
        .solve(&rhs);
    let mut spec = ProblemSpec {
        dim: d,
        strong_convexity: lambda_min,
        lipschitz: max_norm_sq + ridge,
        second_moment: 0.0,
        x_star: x_star.iter().copied().collect(),
        radius: DEFAULT_BOX_RADIUS,
        objective: Objective::Regression {
            data: data.clone(),
            ridge,
        },
    };
    spec.second_moment = spec.box_second_moment();
    Ok(spec)
}

impl ProblemSpec {
    /// Same problem with `M²` restated over a box of radius `radius`.
    pub fn with_radius(mut self, radius: f64) -> Result<Self, ProblemError> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(ProblemError::InvalidRadius(radius));
        }
        self.radius = radius;
        self.second_moment = self.box_second_moment();
        Ok(self)
    }

    /// `M`, the square root of the second-moment bound.
    pub fn gradient_bound(&self) -> f64 {
        self.second_moment.sqrt()
    }

    pub fn sigma(&self) -> Option<f64> {
        match self.objective {
            Objective::Quadratic { sigma } => Some(sigma),
            Objective::Regression { .. } => None,
        }
    }

    fn box_second_moment(&self) -> f64 {
        let r = self.radius;
        match &self.objective {
            // E‖x − u‖² = ‖x‖² + σ²d ≤ R² + σ²d ≤ (R + 3σ√d)².
            Objective::Quadratic { sigma } => {
                let v = r + 3.0 * sigma * (self.dim as f64).sqrt();
                v * v
            }
            // ‖g̃_i(x)‖ ≤ ‖A_i‖·‖x − x*‖ + ‖g̃_i(x*)‖ with A_i = a_i a_iᵀ + λI.
            Objective::Regression { data, ridge } => {
                let m = data.len() as f64;
                data.points
                    .iter()
                    .zip(&data.labels)
                    .map(|(a, &y)| {
                        let norm_sq: f64 = a.iter().map(|v| v * v).sum();
                        let mut at_star = vec![0.0; self.dim];
                        per_sample_gradient(a, y, *ridge, &self.x_star, &mut at_star);
                        let v = (norm_sq + ridge) * r + l2(&at_star);
                        v * v
                    })
                    .sum::<f64>()
                    / m
            }
        }
    }

    /// Exact gradient `∇f(x)`.
    pub fn full_gradient(&self, x: &[f64]) -> Vec<f64> {
        match &self.objective {
            Objective::Quadratic { .. } => x
                .iter()
                .zip(&self.x_star)
                .map(|(xi, si)| xi - si)
                .collect(),
            Objective::Regression { data, ridge } => {
                let m = data.len() as f64;
                let mut total = vec![0.0; self.dim];
                let mut g = vec![0.0; self.dim];
                for (a, &y) in data.points.iter().zip(&data.labels) {
                    per_sample_gradient(a, y, *ridge, x, &mut g);
                    for (t, gi) in total.iter_mut().zip(&g) {
                        *t += gi / m;
                    }
                }
                total
            }
        }
    }

    /// `f(x)`.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        match &self.objective {
            Objective::Quadratic { .. } => 0.5 * dist_sq(x, &self.x_star),
            Objective::Regression { data, ridge } => {
                let m = data.len() as f64;
                let loss: f64 = data
                    .points
                    .iter()
                    .zip(&data.labels)
                    .map(|(a, &y)| {
                        let r = dot(a, x) - y;
                        0.5 * r * r
                    })
                    .sum::<f64>()
                    / m;
                loss + 0.5 * ridge * x.iter().map(|v| v * v).sum::<f64>()
            }
        }
    }

    /// Validated oracle call: checks the view, then draws `g̃(view)`.
    pub fn sample_gradient<R: Rng + ?Sized>(
        &self,
        view: &[f64],
        rng: &mut R,
    ) -> Result<GradientSample, ProblemError> {
        if view.len() != self.dim {
            return Err(ProblemError::DimensionMismatch {
                expected: self.dim,
                found: view.len(),
            });
        }
        if let Some(index) = view.iter().position(|v| !v.is_finite()) {
            return Err(ProblemError::NonFiniteView { index });
        }
        let mut value = vec![0.0; self.dim];
        let draw = self.gradient_into(view, rng, &mut value);
        Ok(GradientSample {
            value,
            source_view: view.to_vec(),
            draw,
        })
    }

    /// `true` iff `x` lies in the test box around `x*`.
    pub fn in_box(&self, x: &[f64]) -> bool {
        dist_sq(x, &self.x_star) <= self.radius * self.radius
    }
}

impl GradientOracle for ProblemSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn minimizer(&self) -> &[f64] {
        &self.x_star
    }

    fn gradient_into<R: Rng + ?Sized>(
        &self,
        view: &[f64],
        rng: &mut R,
        out: &mut [f64],
    ) -> RngDraw {
        match &self.objective {
            Objective::Quadratic { sigma } => {
                if *sigma == 0.0 {
                    for ((o, v), s) in out.iter_mut().zip(view).zip(&self.x_star) {
                        *o = v - s;
                    }
                    RngDraw::Nothing
                } else {
                    for ((o, v), s) in out.iter_mut().zip(view).zip(&self.x_star) {
                        let u: f64 = rng.sample(StandardNormal);
                        *o = (v - s) - sigma * u;
                    }
                    RngDraw::Gaussian { count: out.len() }
                }
            }
            Objective::Regression { data, ridge } => {
                let i = rng.random_range(0..data.len());
                per_sample_gradient(&data.points[i], data.labels[i], *ridge, view, out);
                RngDraw::Index(i)
            }
        }
    }
}

fn per_sample_gradient(a: &[f64], y: f64, ridge: f64, x: &[f64], out: &mut [f64]) {
    let residual = dot(a, x) - y;
    for ((o, ai), xi) in out.iter_mut().zip(a).zip(x) {
        *o = ai * residual + ridge * xi;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖a − b‖²`.
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
