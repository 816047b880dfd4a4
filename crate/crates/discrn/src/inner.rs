//! Inner resource-allocation solver: discretized Laplacian gradient flow
//! with a locally checkable stopping criterion, plus an independent KKT
//! oracle used for evaluation and testing.
//!
//! The flow `p+ = p - eta * L * grad_p f(x, p)` preserves the budget
//! constraint `1' p = P_ref + sum(chi_hat)` because `1' L = 0`, and each
//! agent's update needs only its own and its neighbors' allocation
//! gradients. Iteration stops once every per-agent step satisfies
//! `|p_i+ - p_i| <= delta * eta * lambda2 * omega / sqrt(n)`, which
//! certifies `||p - p*|| <= delta`.

use crate::graph::Graph;
use crate::problem::{agent_block, CostModel};
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InnerError {
    #[error("invalid curvature/spectral constants: need 0 < omega <= theta and 0 < lambda2 <= lambda_n, got omega={omega}, theta={theta}, lambda2={lambda2}, lambda_n={lambda_n}")]
    InvalidConstants {
        omega: f64,
        theta: f64,
        lambda2: f64,
        lambda_n: f64,
    },

    #[error("allocation gradient of agent {agent} is not finite")]
    NonFiniteGradient { agent: usize },

    #[error("stopping criterion not met after {iterations} iterations: max per-agent step {max_step:.3e} > threshold {threshold:.3e}")]
    MaxIters {
        iterations: usize,
        max_step: f64,
        threshold: f64,
        /// Best (final) iterate when the budget ran out.
        best: DVector<f64>,
    },

    #[error("no multiplier bracket within nu in [-1e12, 1e12] (sum at lo {sum_lo:.3e}, at hi {sum_hi:.3e}, budget {budget:.3e})")]
    BracketFailure {
        sum_lo: f64,
        sum_hi: f64,
        budget: f64,
    },
}

/// One allocation problem: fixed outer variable, realization, and budget
/// reference over a given model and graph.
pub struct InnerInstance<'a> {
    pub model: &'a dyn CostModel,
    pub graph: &'a Graph,
    /// Stacked outer variable in `R^{nd}` (agent `i` reads block `i`).
    pub x: &'a DVector<f64>,
    pub chi_hat: &'a DVector<f64>,
    pub p_ref: f64,
}

impl<'a> InnerInstance<'a> {
    /// Right-hand side of the budget constraint.
    pub fn budget(&self) -> f64 {
        self.p_ref + self.chi_hat.sum()
    }

    fn agent_x(&self, i: usize) -> &[f64] {
        agent_block(self.x, i, self.model.dim())
    }

    /// Separable objective `sum_i f_i(x_i, p_i)`.
    pub fn objective(&self, p: &DVector<f64>) -> f64 {
        (0..self.model.agents())
            .map(|i| self.model.value(i, self.agent_x(i), p[i]))
            .sum()
    }

    /// Instance-wide curvature bounds: `omega = min_i omega_i(x_i)`,
    /// `theta = max_i theta_i(x_i)`.
    pub fn curvature_range(&self) -> (f64, f64) {
        let mut omega = f64::INFINITY;
        let mut theta = f64::NEG_INFINITY;
        for i in 0..self.model.agents() {
            let (lo, hi) = self.model.curvature_bounds(i, self.agent_x(i));
            omega = omega.min(lo);
            theta = theta.max(hi);
        }
        (omega, theta)
    }
}

/// Feasible initial allocation: the designated agent (0-based) absorbs
/// `P_ref`, everyone else starts at their own realization.
pub fn feasible_init(chi_hat: &DVector<f64>, p_ref: f64, designated: usize) -> DVector<f64> {
    let mut p = chi_hat.clone();
    p[designated] += p_ref;
    p
}

/// Step-size regime for the Laplacian flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSizeMode {
    /// Half the asymptotic-convergence bound `2 / (theta * lambda_n)`.
    Asymptotic,
    /// The rate-optimal exponential choice `omega lambda2 / (theta^2 lambda_n^2)`.
    Exponential,
}

/// Validated step size for the given curvature and spectral constants.
pub fn inner_step_size(
    omega: f64,
    theta: f64,
    lambda2: f64,
    lambda_n: f64,
    mode: StepSizeMode,
) -> Result<f64, InnerError> {
    if !(omega > 0.0 && omega <= theta && lambda2 > 0.0 && lambda2 <= lambda_n) {
        return Err(InnerError::InvalidConstants {
            omega,
            theta,
            lambda2,
            lambda_n,
        });
    }
    Ok(match mode {
        StepSizeMode::Asymptotic => 1.0 / (theta * lambda_n),
        StepSizeMode::Exponential => omega * lambda2 / (theta * theta * lambda_n * lambda_n),
    })
}

/// Per-step contraction factor of the exponential regime,
/// `sqrt(1 - omega^2 lambda2^2 / (theta^2 lambda_n^2))`.
pub fn contraction_rate(omega: f64, theta: f64, lambda2: f64, lambda_n: f64) -> f64 {
    let r = omega * lambda2 / (theta * lambda_n);
    (1.0 - r * r).max(0.0).sqrt()
}

fn allocation_gradients(
    inst: &InnerInstance,
    p: &DVector<f64>,
) -> Result<DVector<f64>, InnerError> {
    let n = inst.model.agents();
    let mut g = DVector::zeros(n);
    for i in 0..n {
        let gi = inst.model.dp(i, inst.agent_x(i), p[i]);
        if !gi.is_finite() {
            return Err(InnerError::NonFiniteGradient { agent: i });
        }
        g[i] = gi;
    }
    Ok(g)
}

/// One step of the discretized Laplacian flow, computed agent-locally:
/// `p_i+ = p_i - eta * sum_{j in N_i} (g_i - g_j)`.
pub fn laplacian_flow_step(
    inst: &InnerInstance,
    p: &DVector<f64>,
    eta: f64,
) -> Result<DVector<f64>, InnerError> {
    let g = allocation_gradients(inst, p)?;
    let mut next = p.clone();
    for i in 0..inst.model.agents() {
        let mut flow = 0.0;
        for &j in inst.graph.neighbors(i) {
            flow += g[i] - g[j];
        }
        next[i] -= eta * flow;
    }
    Ok(next)
}

/// Options for [`solve_inner`].
#[derive(Debug, Clone)]
pub struct InnerOptions {
    pub max_iters: usize,
    /// Record a per-iteration trace.
    pub collect_trace: bool,
    /// Also solve the KKT oracle once and record distances in the trace.
    pub trace_oracle: bool,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            max_iters: 1_000_000,
            collect_trace: false,
            trace_oracle: false,
        }
    }
}

/// One row of the optional per-solve trace.
#[derive(Debug, Clone)]
pub struct InnerTraceRow {
    pub iter: usize,
    pub objective: f64,
    pub dist_to_opt: Option<f64>,
    pub max_step: f64,
}

/// Outcome of an inner solve that met the stopping criterion.
#[derive(Debug, Clone)]
pub struct InnerResult {
    /// Post-criterion iterate `p+` (the certified approximate solution).
    pub p_tilde: DVector<f64>,
    pub iterations: usize,
    /// Per-agent `|p_i+ - p_i|` of the final step (all at most `threshold`).
    pub final_step_norms: Vec<f64>,
    pub eta: f64,
    pub delta: f64,
    /// Stopping threshold `delta * eta * lambda2 * omega / sqrt(n)`.
    pub threshold: f64,
    pub omega: f64,
    pub theta: f64,
    /// Predicted per-step contraction factor of the exponential regime.
    pub rate: f64,
    /// Predicted iterations to reach `delta` accuracy,
    /// `ceil(log(delta/||p0 - p*||) / log(rate))`; only available when the
    /// oracle ran (`trace_oracle`).
    pub predicted_bound: Option<usize>,
    /// Max over iterations of `|1' p - budget|`.
    pub max_budget_drift: f64,
    pub trace: Option<Vec<InnerTraceRow>>,
}

/// Run the Laplacian flow with the exponential step size until the
/// distributed stopping criterion certifies `||p_tilde - p*|| <= delta`.
pub fn solve_inner(
    inst: &InnerInstance,
    delta: f64,
    opts: &InnerOptions,
) -> Result<InnerResult, InnerError> {
    assert!(delta > 0.0, "delta must be positive");
    let n = inst.model.agents();
    let (omega, theta) = inst.curvature_range();
    let (lambda2, lambda_n) = (inst.graph.lambda2(), inst.graph.lambda_n());
    let eta = inner_step_size(omega, theta, lambda2, lambda_n, StepSizeMode::Exponential)?;
    let threshold = delta * eta * lambda2 * omega / (n as f64).sqrt();
    let budget = inst.budget();

    // Cache linear allocation-gradient profiles when the model provides
    // them; x is fixed for the whole solve.
    let profiles: Option<Vec<(f64, f64)>> = (0..n)
        .map(|i| inst.model.p_linear_profile(i, inst.agent_x(i)))
        .collect();

    let p_star = if opts.trace_oracle {
        Some(kkt_oracle(inst.model, inst.x, inst.chi_hat, inst.p_ref)?)
    } else {
        None
    };
    let mut trace = opts.collect_trace.then(Vec::new);

    let mut p = feasible_init(inst.chi_hat, inst.p_ref, 0);
    let rate = contraction_rate(omega, theta, lambda2, lambda_n);
    let predicted_bound = p_star.as_ref().map(|ps| {
        let dist0 = (&p - ps).norm();
        if dist0 <= delta || rate <= 0.0 {
            0
        } else {
            ((delta / dist0).ln() / rate.ln()).ceil() as usize
        }
    });
    let mut grads = DVector::zeros(n);
    let mut next = DVector::zeros(n);
    let mut max_drift = (p.sum() - budget).abs();

    for t in 1..=opts.max_iters {
        match &profiles {
            Some(prof) => {
                for i in 0..n {
                    let (s, c) = prof[i];
                    grads[i] = s * p[i] + c;
                }
                if !grads.iter().all(|g| g.is_finite()) {
                    let agent = grads.iter().position(|g| !g.is_finite()).unwrap();
                    return Err(InnerError::NonFiniteGradient { agent });
                }
            }
            None => grads = allocation_gradients(inst, &p)?,
        }

        let mut max_step = 0.0_f64;
        for i in 0..n {
            let mut flow = 0.0;
            for &j in inst.graph.neighbors(i) {
                flow += grads[i] - grads[j];
            }
            let step = eta * flow;
            next[i] = p[i] - step;
            max_step = max_step.max(step.abs());
        }
        max_drift = max_drift.max((next.sum() - budget).abs());

        if let Some(rows) = trace.as_mut() {
            rows.push(InnerTraceRow {
                iter: t,
                objective: inst.objective(&p),
                dist_to_opt: p_star.as_ref().map(|ps| (&p - ps).norm()),
                max_step,
            });
        }

        if max_step <= threshold {
            let final_step_norms = (0..n).map(|i| (next[i] - p[i]).abs()).collect();
            return Ok(InnerResult {
                p_tilde: next,
                iterations: t,
                final_step_norms,
                eta,
                delta,
                threshold,
                omega,
                theta,
                rate,
                predicted_bound,
                max_budget_drift: max_drift,
                trace,
            });
        }
        std::mem::swap(&mut p, &mut next);
    }

    let grads_now = allocation_gradients(inst, &p)?;
    let mut max_step = 0.0_f64;
    for i in 0..n {
        let mut flow = 0.0;
        for &j in inst.graph.neighbors(i) {
            flow += grads_now[i] - grads_now[j];
        }
        max_step = max_step.max((eta * flow).abs());
    }
    Err(InnerError::MaxIters {
        iterations: opts.max_iters,
        max_step,
        threshold,
        best: p,
    })
}

const NU_CAP: f64 = 1e12;

/// Solve the coupled stationarity system `df_i/dp_i(x_i, p_i) = nu` for all
/// agents with `1' p = P_ref + sum(chi_hat)`, by monotone search on the
/// shared multiplier `nu`.
///
/// Models that expose linear allocation-gradient profiles get a closed-form
/// solve; otherwise each `p_i(nu)` is found by safeguarded Newton inside a
/// curvature-derived bracket and `nu` by Newton with bisection fallback.
/// Budget residual tolerance: `1e-10`.
pub fn kkt_oracle(
    model: &dyn CostModel,
    x: &DVector<f64>,
    chi_hat: &DVector<f64>,
    p_ref: f64,
) -> Result<DVector<f64>, InnerError> {
    let n = model.agents();
    let d = model.dim();
    let budget = p_ref + chi_hat.sum();

    if n == 1 {
        return Ok(DVector::from_element(1, budget));
    }

    let profiles: Option<Vec<(f64, f64)>> = (0..n)
        .map(|i| model.p_linear_profile(i, agent_block(x, i, d)))
        .collect();
    if let Some(prof) = profiles {
        if prof.iter().all(|&(s, _)| s > 0.0) {
            let inv_sum: f64 = prof.iter().map(|&(s, _)| 1.0 / s).sum();
            let shift: f64 = prof.iter().map(|&(s, c)| c / s).sum();
            let nu = (budget + shift) / inv_sum;
            return Ok(DVector::from_iterator(
                n,
                prof.iter().map(|&(s, c)| (nu - c) / s),
            ));
        }
    }

    // General path: per-agent scalar root inside a curvature bracket.
    let agent_root = |i: usize, nu: f64| -> Result<f64, InnerError> {
        let xi = agent_block(x, i, d);
        let (omega_i, theta_i) = model.curvature_bounds(i, xi);
        if !(omega_i > 0.0 && omega_i <= theta_i) {
            return Err(InnerError::InvalidConstants {
                omega: omega_i,
                theta: theta_i,
                lambda2: 1.0,
                lambda_n: 1.0,
            });
        }
        let g0 = model.dp(i, xi, 0.0);
        if !g0.is_finite() {
            return Err(InnerError::NonFiniteGradient { agent: i });
        }
        let (mut lo, mut hi) = if nu >= g0 {
            ((nu - g0) / theta_i, (nu - g0) / omega_i)
        } else {
            ((nu - g0) / omega_i, (nu - g0) / theta_i)
        };
        // Strong convexity guarantees the root lies in [lo, hi]; widen a
        // hair against models whose reported bounds are merely approximate.
        let pad = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
        lo -= pad;
        hi += pad;
        // The bracket is only valid if the gradient actually changes sign
        // across it; a violation means the reported curvature bounds do not
        // hold (e.g. a saturating gradient).
        let sign_tol = 1e-9 * (1.0 + nu.abs());
        let glo = model.dp(i, xi, lo) - nu;
        let ghi = model.dp(i, xi, hi) - nu;
        if !glo.is_finite() || !ghi.is_finite() {
            return Err(InnerError::NonFiniteGradient { agent: i });
        }
        if glo > sign_tol || ghi < -sign_tol {
            return Err(InnerError::BracketFailure {
                sum_lo: glo,
                sum_hi: ghi,
                budget,
            });
        }
        let mut p = 0.5 * (lo + hi);
        for _ in 0..200 {
            let gp = model.dp(i, xi, p) - nu;
            if !gp.is_finite() {
                return Err(InnerError::NonFiniteGradient { agent: i });
            }
            if gp.abs() <= 1e-13 * (1.0 + nu.abs()) {
                return Ok(p);
            }
            if gp <= 0.0 {
                lo = p;
            } else {
                hi = p;
            }
            // Newton inside the bracket, bisection otherwise.
            let slope = model.dpp(i, xi, p);
            let candidate = if slope > 0.0 {
                p - gp / slope
            } else {
                f64::NAN
            };
            p = if candidate.is_finite() && candidate > lo && candidate < hi {
                candidate
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 1e-15 * (1.0 + p.abs()) {
                return Ok(p);
            }
        }
        Ok(p)
    };

    let sum_p = |nu: f64| -> Result<(DVector<f64>, f64), InnerError> {
        let mut p = DVector::zeros(n);
        for i in 0..n {
            p[i] = agent_root(i, nu)?;
        }
        let s = p.sum();
        Ok((p, s))
    };

    // Bracket nu around the budget by geometric expansion.
    let mut nu_lo = 0.0;
    let mut nu_hi = 0.0;
    let (_, mut sum_lo) = sum_p(nu_lo)?;
    let mut sum_hi = sum_lo;
    let mut step = 1.0;
    while sum_lo > budget {
        nu_lo -= step;
        step *= 2.0;
        if nu_lo < -NU_CAP {
            return Err(InnerError::BracketFailure {
                sum_lo,
                sum_hi,
                budget,
            });
        }
        sum_lo = sum_p(nu_lo)?.1;
    }
    step = 1.0;
    while sum_hi < budget {
        nu_hi += step;
        step *= 2.0;
        if nu_hi > NU_CAP {
            return Err(InnerError::BracketFailure {
                sum_lo,
                sum_hi,
                budget,
            });
        }
        sum_hi = sum_p(nu_hi)?.1;
    }

    let mut nu = 0.5 * (nu_lo + nu_hi);
    for _ in 0..200 {
        let (p, s) = sum_p(nu)?;
        let resid = s - budget;
        if resid.abs() <= 1e-10 {
            return Ok(p);
        }
        if resid < 0.0 {
            nu_lo = nu;
        } else {
            nu_hi = nu;
        }
        let dsum: f64 = (0..n)
            .map(|i| 1.0 / model.dpp(i, agent_block(x, i, d), p[i]))
            .sum();
        let newton = nu - resid / dsum;
        nu = if newton.is_finite() && newton > nu_lo && newton < nu_hi {
            newton
        } else {
            0.5 * (nu_lo + nu_hi)
        };
    }
    let (p, s) = sum_p(nu)?;
    if (s - budget).abs() <= 1e-10 {
        Ok(p)
    } else {
        Err(InnerError::BracketFailure {
            sum_lo: s,
            sum_hi: s,
            budget,
        })
    }
}
