//! Cost-model abstraction, sampling distributions, and the concrete
//! experiment scenarios.
//!
//! A [`CostModel`] evaluates per-agent local costs `f_i(x_i, p_i)` together
//! with every derivative the solvers need: first and second derivatives in
//! the allocation variable `p_i`, and gradient/Hessian blocks in the local
//! decision variable `x_i`. Models also report per-instance curvature
//! bounds `(omega_i, theta_i)` on `d2f/dp2` at the current `x`, which is
//! what the inner solver's step size and stopping criterion consume.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

mod ev_tou;
mod nonconvex;
pub(crate) mod poly;
mod two_driver;

pub use ev_tou::{make_ev_tou_scenario, price_signal, EvAgent, EvTouCost};
pub use nonconvex::{make_nonconvex_scenario, NonconvexAgent, NonconvexCost};
pub use two_driver::{make_two_driver_example, TwoDriverCost, Weather};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("uniform marginal requires a < b, got [{a}, {b}]")]
    InvalidUniform { a: f64, b: f64 },

    #[error("scenario requires at least {min} agents, got {n}")]
    TooFewAgents { n: usize, min: usize },
}

/// Per-agent local cost `f_i(x_i, p_i)` with analytic derivatives.
///
/// `x_i` is the agent's local copy of the decision variable (length `d`);
/// `p_i` is the scalar allocation. Evaluation is pure and reentrant.
pub trait CostModel: Send + Sync {
    /// Number of agents.
    fn agents(&self) -> usize;

    /// Dimension `d` of each local decision variable.
    fn dim(&self) -> usize;

    /// Local cost value.
    fn value(&self, i: usize, x_i: &[f64], p_i: f64) -> f64;

    /// First derivative in the allocation, `df_i/dp_i`.
    fn dp(&self, i: usize, x_i: &[f64], p_i: f64) -> f64;

    /// Second derivative in the allocation, `d2f_i/dp_i2`.
    fn dpp(&self, i: usize, x_i: &[f64], p_i: f64) -> f64;

    /// Gradient block in the decision variable, `grad_{x_i} f_i` (length `d`).
    fn grad_x(&self, i: usize, x_i: &[f64], p_i: f64) -> DVector<f64>;

    /// Hessian block in the decision variable, `hess_{x_i x_i} f_i` (`d x d`).
    fn hess_x(&self, i: usize, x_i: &[f64], p_i: f64) -> DMatrix<f64>;

    /// Bounds `(omega_i, theta_i)` on `d2f_i/dp_i2` at this `x_i`.
    ///
    /// The default assumes curvature independent of `p_i` (true for every
    /// scenario here, all quadratic in the allocation); models with
    /// `p`-dependent curvature must override.
    fn curvature_bounds(&self, i: usize, x_i: &[f64]) -> (f64, f64) {
        let c = self.dpp(i, x_i, 0.0);
        (c, c)
    }

    /// Coefficients `(slope, intercept)` when `df_i/dp_i = slope * p_i +
    /// intercept` exactly, enabling closed-form allocation solves. `None`
    /// for models nonlinear in the allocation gradient.
    fn p_linear_profile(&self, i: usize, x_i: &[f64]) -> Option<(f64, f64)> {
        let _ = (i, x_i);
        None
    }

    /// Declared Lipschitz constant of `hess_{x_i x_i} f_i` in `x` (over the
    /// operating region). Informational; the submodel coefficient `rho_i`
    /// used by the outer loop comes from configuration.
    fn hess_lipschitz(&self, i: usize) -> f64;
}

/// One per-agent marginal of the disturbance distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Marginal {
    /// Deterministic: every draw equals the given value.
    Dirac(f64),
    /// Uniform on `[a, b)`.
    Uniform(f64, f64),
}

/// Product distribution `D = D_1 x ... x D_n` with independent marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    marginals: Vec<Marginal>,
}

impl DistributionSpec {
    pub fn new(marginals: Vec<Marginal>) -> Result<Self, ProblemError> {
        for m in &marginals {
            if let Marginal::Uniform(a, b) = *m {
                // NaN-safe: rejects NaN bounds along with empty ranges.
                #[allow(clippy::neg_cmp_op_on_partial_ord)]
                if !(a < b) {
                    return Err(ProblemError::InvalidUniform { a, b });
                }
            }
        }
        Ok(Self { marginals })
    }

    /// All marginals identical.
    pub fn uniform_iid(n: usize, a: f64, b: f64) -> Result<Self, ProblemError> {
        Self::new(vec![Marginal::Uniform(a, b); n])
    }

    pub fn dirac_iid(n: usize, value: f64) -> Self {
        Self {
            marginals: vec![Marginal::Dirac(value); n],
        }
    }

    pub fn n(&self) -> usize {
        self.marginals.len()
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.marginals
    }

    /// True when every marginal is a point mass (realizations carry no
    /// randomness).
    pub fn is_deterministic(&self) -> bool {
        self.marginals
            .iter()
            .all(|m| matches!(m, Marginal::Dirac(_)))
    }
}

/// Draw one realization `chi_hat`, component `i` from marginal `D_i`.
///
/// Deterministic per generator state: callers address a fresh stream per
/// (sample, instance) via [`crate::rng::stream`].
pub fn sample_chi<R: Rng>(spec: &DistributionSpec, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(
        spec.n(),
        spec.marginals.iter().map(|m| match *m {
            Marginal::Dirac(a) => a,
            Marginal::Uniform(a, b) => a + (b - a) * rng.gen::<f64>(),
        }),
    )
}

/// One inner-problem cost instance with its weight in the per-sample
/// objective (weights over a scenario's instances sum to 1).
#[derive(Clone)]
pub struct Instance {
    pub model: Arc<dyn CostModel>,
    pub weight: f64,
}

/// Serializable scenario parameters, written alongside experiment outputs
/// for reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioParams {
    TwoDriver {
        weather: String,
    },
    Nonconvex {
        seed: u64,
        agents: Vec<NonconvexAgent>,
    },
    EvTou {
        seed: u64,
        horizon: usize,
        prices: Vec<f64>,
        agents: Vec<EvAgent>,
    },
}

/// A fully instantiated scenario: cost instances, disturbance distribution,
/// and the reference budget.
#[derive(Clone)]
pub struct ScenarioBundle {
    pub instances: Vec<Instance>,
    pub dist: DistributionSpec,
    pub p_ref: f64,
    pub n: usize,
    pub d: usize,
    pub params: ScenarioParams,
}

impl ScenarioBundle {
    /// Replace the disturbance distribution with a point mass at `value`
    /// for every agent (deterministic sanity configurations).
    pub fn with_dirac(mut self, value: f64) -> Self {
        self.dist = DistributionSpec::dirac_iid(self.n, value);
        self
    }

    /// Serialize the scenario parameters as TOML.
    pub fn params_toml(&self) -> String {
        toml::to_string_pretty(&self.params).expect("scenario params serialize")
    }
}

/// View of agent `i`'s coordinates within a stacked vector in `R^{nd}`.
pub fn agent_block(x: &DVector<f64>, i: usize, d: usize) -> &[f64] {
    &x.as_slice()[i * d..(i + 1) * d]
}

#[cfg(test)]
pub(crate) mod testing {
    /// Central finite difference of a scalar function of one coordinate.
    pub fn central_diff(f: impl Fn(f64) -> f64, at: f64, h: f64) -> f64 {
        (f(at + h) - f(at - h)) / (2.0 * h)
    }

    pub fn assert_rel_close(actual: f64, expected: f64, rel: f64, what: &str) {
        let scale = 1.0_f64.max(expected.abs()).max(actual.abs());
        assert!(
            (actual - expected).abs() <= rel * scale,
            "{what}: {actual} vs {expected} (rel tol {rel})"
        );
    }
}
