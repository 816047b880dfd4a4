//! Outer loop on the stacked decision variable `x in R^{nd}`: batch
//! assembly from inexact inner solves, empirical derivatives, the cubic /
//! gradient / Newton submodels, the decentralized-gradient subsolver, and
//! the subsolver-output condition check.
//!
//! The empirical objective at iteration `k` is
//! `F_S(x) = (1/S) sum_s sum_i f_i(x_i, ptilde_i^s)` (for horizon scenarios
//! additionally averaged over per-step instances). Because `F_S` is
//! separable across agents, its Hessian is exactly block diagonal, and the
//! cubic submodel's regularization `sum_i (rho_i/6) ||x_i - x_i^k||^3` is
//! directly separable as well.

use crate::graph::Graph;
use crate::inner::{solve_inner, InnerError, InnerInstance, InnerOptions, InnerResult};
use crate::problem::{agent_block, sample_chi, ScenarioBundle};
use crate::rng::{self, domain};
use crate::util::fmt_float;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Deserialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OuterError {
    #[error("inner solve failed at sample {sample}, instance {instance}: {source}")]
    InnerSolve {
        sample: usize,
        instance: usize,
        source: InnerError,
    },

    #[error(
        "subsolver iterate norm {norm:.3e} exceeded the divergence bound at iteration {iteration}"
    )]
    SubsolverDiverged { norm: f64, iteration: usize },

    #[error("condition check (ii) failed in {failed}/{total} outer iterations; c, epsilon, or the subsolver budget are mis-tuned")]
    Condition1Failures { failed: usize, total: usize },
}

/// Which submodel the subsolver minimizes each outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmodelKind {
    /// Second-order model plus separable cubic regularization.
    Cubic,
    /// First-order model plus quadratic regularization (no Hessian term).
    Gradient,
    /// Second-order model plus quadratic regularization.
    Newton,
}

/// Submodel coefficients and the condition-check constants.
#[derive(Debug, Clone)]
pub struct SubmodelParams {
    pub kind: SubmodelKind,
    /// Per-agent cubic coefficients.
    pub rho: Vec<f64>,
    pub eta_g: f64,
    pub eta_h: f64,
    pub c: f64,
    pub epsilon: f64,
}

impl SubmodelParams {
    pub fn uniform(
        kind: SubmodelKind,
        n: usize,
        rho: f64,
        eta_g: f64,
        eta_h: f64,
        c: f64,
        epsilon: f64,
    ) -> Self {
        Self {
            kind,
            rho: vec![rho; n],
            eta_g,
            eta_h,
            c,
            epsilon,
        }
    }

    pub fn rho_max(&self) -> f64 {
        self.rho.iter().copied().fold(0.0, f64::max)
    }
}

/// Variance and interconnection constants from the convergence analysis.
/// Advisory only: when provided, the harness logs the batch size the
/// analysis would ask for, but never enforces it.
#[derive(Debug, Clone, Deserialize)]
pub struct AnalysisConstants {
    pub sigma1: f64,
    pub sigma2: f64,
    pub m1: f64,
    pub m2: f64,
    pub c_bar: f64,
    pub zeta: f64,
    /// Accumulation-point bound; carried for completeness, not used by the
    /// batch-size formula.
    #[serde(default)]
    pub kappa: f64,
    pub psi_g: f64,
    pub psi_h: f64,
}

impl AnalysisConstants {
    /// Batch-size lower bound `max{M1/(cb e), s1^2/(cb^2 e^2),
    /// M2/(cb sqrt(rho e)), s2^2/(cb^2 rho e)} * log((e^1.5 zeta cb)^-1)`
    /// with the unspecified constant in the log factor taken as 1.
    pub fn recommended_batch_size(&self, epsilon: f64, rho: f64) -> f64 {
        let cb = self.c_bar;
        let base = (self.m1 / (cb * epsilon))
            .max(self.sigma1 * self.sigma1 / (cb * cb * epsilon * epsilon))
            .max(self.m2 / (cb * (rho * epsilon).sqrt()))
            .max(self.sigma2 * self.sigma2 / (cb * cb * rho * epsilon));
        let log_term = (1.0 / (epsilon.powf(1.5) * self.zeta * cb)).ln().max(1.0);
        base * log_term
    }
}

/// One inexact inner solution within a batch.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    /// Index into the scenario's instance list.
    pub instance: usize,
    pub chi: DVector<f64>,
    pub p_tilde: DVector<f64>,
    pub iterations: usize,
    pub weight: f64,
    pub max_budget_drift: f64,
}

/// A batch of `S` samples, each holding one solution per scenario instance.
#[derive(Debug, Clone)]
pub struct Batch {
    pub delta: f64,
    pub samples: Vec<Vec<InnerSolution>>,
}

impl Batch {
    pub fn s(&self) -> usize {
        self.samples.len()
    }

    /// Sum of all realization components; used to verify that compared
    /// methods consume identical randomness.
    pub fn chi_checksum(&self) -> f64 {
        self.samples
            .iter()
            .flat_map(|sols| sols.iter())
            .map(|sol| sol.chi.sum())
            .sum()
    }

    /// Mean and max inner iteration counts.
    pub fn iteration_stats(&self) -> (f64, usize) {
        let mut total = 0usize;
        let mut max = 0usize;
        let mut count = 0usize;
        for sol in self.samples.iter().flatten() {
            total += sol.iterations;
            max = max.max(sol.iterations);
            count += 1;
        }
        (total as f64 / count.max(1) as f64, max)
    }

    pub fn max_budget_drift(&self) -> f64 {
        self.samples
            .iter()
            .flatten()
            .map(|s| s.max_budget_drift)
            .fold(0.0, f64::max)
    }
}

/// Stack the per-agent mean of `x` into every agent block.
pub fn consensus_mean(x: &DVector<f64>, n: usize, d: usize) -> DVector<f64> {
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += x[i * d + c];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    DVector::from_iterator(n * d, (0..n * d).map(|idx| mean[idx % d]))
}

/// Euclidean norm of the deviation of `x` from its per-coordinate agent
/// mean (zero exactly on the agreement subspace).
pub fn disagreement(x: &DVector<f64>, n: usize, d: usize) -> f64 {
    let mean = consensus_mean(x, n, d);
    (x - mean).norm()
}

/// Draw `S` realizations for outer iteration `k` and solve every scenario
/// instance at the common `x`. Sample streams are addressed by
/// `(master_seed, k, s, instance)` only, so compared methods share
/// realizations and parallel assembly is bit-identical to sequential.
///
/// With `trace_dir` set, every solve writes a per-iteration trace CSV
/// `k####_s###_i###.csv` (iteration, objective, distance to the oracle
/// solution, max per-agent step).
#[allow(clippy::too_many_arguments)]
pub fn assemble_batch(
    scenario: &ScenarioBundle,
    graph: &Graph,
    x: &DVector<f64>,
    s_batch: usize,
    delta: f64,
    master_seed: u64,
    k: usize,
    inner_opts: &InnerOptions,
    strict_common_x: bool,
    trace_dir: Option<&Path>,
) -> Result<Batch, OuterError> {
    let x_used = if strict_common_x {
        consensus_mean(x, scenario.n, scenario.d)
    } else {
        x.clone()
    };
    let opts = match trace_dir {
        Some(_) => InnerOptions {
            collect_trace: true,
            trace_oracle: true,
            ..inner_opts.clone()
        },
        None => inner_opts.clone(),
    };

    let units: Vec<(usize, usize)> = (0..s_batch)
        .flat_map(|s| (0..scenario.instances.len()).map(move |inst| (s, inst)))
        .collect();

    let solutions: Vec<Result<InnerSolution, OuterError>> = units
        .par_iter()
        .map(|&(s, inst_idx)| {
            let inst = &scenario.instances[inst_idx];
            let mut stream = rng::stream(
                master_seed,
                &[domain::BATCH, k as u64, s as u64, inst_idx as u64],
            );
            let chi = sample_chi(&scenario.dist, &mut stream);
            let problem = InnerInstance {
                model: inst.model.as_ref(),
                graph,
                x: &x_used,
                chi_hat: &chi,
                p_ref: scenario.p_ref,
            };
            let res =
                solve_inner(&problem, delta, &opts).map_err(|source| OuterError::InnerSolve {
                    sample: s,
                    instance: inst_idx,
                    source,
                })?;
            if let Some(dir) = trace_dir {
                write_inner_trace(dir, k, s, inst_idx, &res);
            }
            Ok(InnerSolution {
                instance: inst_idx,
                chi,
                p_tilde: res.p_tilde,
                iterations: res.iterations,
                weight: inst.weight,
                max_budget_drift: res.max_budget_drift,
            })
        })
        .collect();

    let per_sample = scenario.instances.len();
    let mut samples = Vec::with_capacity(s_batch);
    let mut iter = solutions.into_iter();
    for _ in 0..s_batch {
        let mut sols = Vec::with_capacity(per_sample);
        for _ in 0..per_sample {
            sols.push(iter.next().expect("unit count")?);
        }
        samples.push(sols);
    }
    Ok(Batch { delta, samples })
}

/// Diagnostic output only; failures are reported but do not abort a run.
fn write_inner_trace(dir: &Path, k: usize, s: usize, inst: usize, res: &InnerResult) {
    let Some(rows) = res.trace.as_ref() else {
        return;
    };
    let path = dir.join(format!("k{k:04}_s{s:03}_i{inst:03}.csv"));
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(f, "iter,objective,dist_to_opt,max_step")?;
        for row in rows {
            writeln!(
                f,
                "{},{},{},{}",
                row.iter,
                fmt_float(row.objective),
                row.dist_to_opt.map(fmt_float).unwrap_or_default(),
                fmt_float(row.max_step)
            )?;
        }
        Ok(())
    };
    if let Err(e) = write() {
        eprintln!(
            "warning: could not write inner trace {}: {e}",
            path.display()
        );
    }
}

/// Empirical objective `F_S(x)` of a frozen batch (allocations fixed).
pub fn batch_objective(batch: &Batch, x: &DVector<f64>, scenario: &ScenarioBundle) -> f64 {
    let d = scenario.d;
    let mut total = 0.0;
    for sols in &batch.samples {
        for sol in sols {
            let model = scenario.instances[sol.instance].model.as_ref();
            let mut val = 0.0;
            for i in 0..scenario.n {
                val += model.value(i, agent_block(x, i, d), sol.p_tilde[i]);
            }
            total += sol.weight * val;
        }
    }
    total / batch.s() as f64
}

/// Batch gradient `g^k` (stacked, length `nd`) and block-diagonal Hessian
/// `H^k` (one `d x d` block per agent) of the frozen batch at `x`.
pub fn empirical_derivatives(
    batch: &Batch,
    x: &DVector<f64>,
    scenario: &ScenarioBundle,
) -> (DVector<f64>, Vec<DMatrix<f64>>) {
    let (n, d) = (scenario.n, scenario.d);
    let mut g = DVector::zeros(n * d);
    let mut h: Vec<DMatrix<f64>> = (0..n).map(|_| DMatrix::zeros(d, d)).collect();
    let inv_s = 1.0 / batch.s() as f64;
    for sols in &batch.samples {
        for sol in sols {
            let model = scenario.instances[sol.instance].model.as_ref();
            let w = sol.weight * inv_s;
            for i in 0..n {
                let xi = agent_block(x, i, d);
                let gi = model.grad_x(i, xi, sol.p_tilde[i]);
                let hi = model.hess_x(i, xi, sol.p_tilde[i]);
                for c in 0..d {
                    g[i * d + c] += w * gi[c];
                }
                h[i] += w * hi;
            }
        }
    }
    (g, h)
}

fn block_quad_gradient_into(
    params: &SubmodelParams,
    xi_blocks: &DVector<f64>,
    g: &DVector<f64>,
    h: &[DMatrix<f64>],
    out: &mut DVector<f64>,
) {
    let d = if h.is_empty() { 1 } else { h[0].nrows() };
    out.copy_from(g);
    let n = h.len();
    for i in 0..n {
        let xi = xi_blocks.rows(i * d, d);
        match params.kind {
            SubmodelKind::Gradient => {
                for c in 0..d {
                    out[i * d + c] += params.eta_g * xi[c];
                }
            }
            SubmodelKind::Newton => {
                let hxi = &h[i] * xi;
                for c in 0..d {
                    out[i * d + c] += hxi[c] + params.eta_h * xi[c];
                }
            }
            SubmodelKind::Cubic => {
                let hxi = &h[i] * xi;
                let norm = xi.norm();
                let coef = 0.5 * params.rho[i] * norm;
                for c in 0..d {
                    out[i * d + c] += hxi[c] + coef * xi[c];
                }
            }
        }
    }
}

/// Submodel value and gradient at `x`, expanded around `x_k` with batch
/// derivatives `(g, h)` and base value `f_sk = F_S(x_k)`.
pub fn submodel_eval(
    params: &SubmodelParams,
    x: &DVector<f64>,
    x_k: &DVector<f64>,
    g: &DVector<f64>,
    h: &[DMatrix<f64>],
    f_sk: f64,
) -> (f64, DVector<f64>) {
    let xi = x - x_k;
    let value = submodel_value(params, &xi, g, h, f_sk);
    let mut grad = DVector::zeros(x.len());
    block_quad_gradient_into(params, &xi, g, h, &mut grad);
    (value, grad)
}

fn submodel_value(
    params: &SubmodelParams,
    xi: &DVector<f64>,
    g: &DVector<f64>,
    h: &[DMatrix<f64>],
    f_sk: f64,
) -> f64 {
    let n = h.len();
    let d = if n == 0 { 1 } else { h[0].nrows() };
    let mut value = f_sk + g.dot(xi);
    for (i, h_i) in h.iter().enumerate() {
        let xi_i = xi.rows(i * d, d);
        match params.kind {
            SubmodelKind::Gradient => {
                value += 0.5 * params.eta_g * xi_i.norm_squared();
            }
            SubmodelKind::Newton => {
                value += 0.5 * (xi_i.dot(&(h_i * xi_i))) + 0.5 * params.eta_h * xi_i.norm_squared();
            }
            SubmodelKind::Cubic => {
                let norm = xi_i.norm();
                value += 0.5 * (xi_i.dot(&(h_i * xi_i))) + params.rho[i] / 6.0 * norm * norm * norm;
            }
        }
    }
    value
}

/// Subsolver schedule and stop rule.
#[derive(Debug, Clone)]
pub struct SubsolverConfig {
    /// Stop when the sup-norm of the iterate update falls below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Clip range for the gradient-direction initialization radius.
    pub r_min: f64,
    pub r_max: f64,
    /// Iterate-norm bound beyond which the subsolve is declared divergent.
    pub divergence_norm: f64,
}

impl Default for SubsolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 50_000,
            r_min: 1e-3,
            r_max: 10.0,
            divergence_norm: 1e8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubsolveOutcome {
    pub x_next: DVector<f64>,
    pub iterations: usize,
}

fn block_spectral_norm(h: &[DMatrix<f64>]) -> f64 {
    h.iter()
        .map(|m| {
            if m.nrows() == 1 {
                m[(0, 0)].abs()
            } else {
                m.clone()
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .fold(0.0_f64, |acc, &v| acc.max(v.abs()))
            }
        })
        .fold(0.0, f64::max)
}

/// Decentralized gradient descent on the submodel:
/// `x^{t+1} = W x^t - (alpha0 / t) grad m(x^t)`, initialized a distance `r`
/// along the negative batch gradient, stopping when updates become very
/// small or the iteration budget runs out.
pub fn dgd_subsolve(
    params: &SubmodelParams,
    x_k: &DVector<f64>,
    w: &DMatrix<f64>,
    g: &DVector<f64>,
    h: &[DMatrix<f64>],
    cfg: &SubsolverConfig,
) -> Result<SubsolveOutcome, OuterError> {
    let g_norm = g.norm();
    if g_norm == 0.0 {
        return Ok(SubsolveOutcome {
            x_next: x_k.clone(),
            iterations: 0,
        });
    }

    let divisor = match params.kind {
        SubmodelKind::Cubic => params.rho_max(),
        SubmodelKind::Gradient => params.eta_g,
        SubmodelKind::Newton => params.eta_h,
    }
    .max(f64::MIN_POSITIVE);
    let r = (g_norm / divisor).clamp(cfg.r_min, cfg.r_max);

    let h_norm = block_spectral_norm(h);
    let curvature = match params.kind {
        SubmodelKind::Cubic => h_norm + params.rho_max() * r,
        SubmodelKind::Gradient => params.eta_g,
        SubmodelKind::Newton => h_norm + params.eta_h,
    };
    let alpha0 = 1.0 / curvature.max(1e-12);

    let mut x = x_k - (r / g_norm) * g;
    let mut grad = DVector::zeros(x.len());
    let mut x_next = DVector::zeros(x.len());

    for t in 1..=cfg.max_iters {
        let xi = &x - x_k;
        block_quad_gradient_into(params, &xi, g, h, &mut grad);
        // x_next = W x - alpha_t * grad
        x_next.gemv(1.0, w, &x, 0.0);
        x_next.axpy(-(alpha0 / t as f64), &grad, 1.0);

        let norm = x_next.norm();
        if !norm.is_finite() || norm > cfg.divergence_norm {
            return Err(OuterError::SubsolverDiverged { norm, iteration: t });
        }
        let step_inf = (&x_next - &x).amax();
        std::mem::swap(&mut x, &mut x_next);
        if step_inf <= cfg.tol {
            return Ok(SubsolveOutcome {
                x_next: x,
                iterations: t,
            });
        }
    }
    Ok(SubsolveOutcome {
        x_next: x,
        iterations: cfg.max_iters,
    })
}

/// Outcome of the subsolver-output condition check.
#[derive(Debug, Clone)]
pub struct Condition1Report {
    /// `||(L (x) I_d) x_next||`.
    pub agreement_residual: f64,
    pub agreement_tol: f64,
    pub agreement_pass: bool,
    /// `m(x_next) - m(x_k)`.
    pub decrease: f64,
    /// `m(x_next) - m(x_k) + c e ||xi|| + c sqrt(rho e) ||xi||^2`
    /// (strictly negative required).
    pub margin: f64,
    pub decrease_pass: bool,
}

/// Check the two subsolver-output requirements: consensus feasibility of
/// `x_next`, and strict submodel decrease beyond the `(c, epsilon)` margin.
#[allow(clippy::too_many_arguments)]
pub fn check_condition1(
    x_k: &DVector<f64>,
    x_next: &DVector<f64>,
    m_at_next: f64,
    m_at_k: f64,
    params: &SubmodelParams,
    graph: &Graph,
    d: usize,
    agreement_tol: f64,
) -> Condition1Report {
    let n = graph.n();
    let mut residual_sq = 0.0;
    for i in 0..n {
        for c in 0..d {
            let mut acc = 0.0;
            for &j in graph.neighbors(i) {
                acc += x_next[i * d + c] - x_next[j * d + c];
            }
            residual_sq += acc * acc;
        }
    }
    let agreement_residual = residual_sq.sqrt();

    let xi_norm = (x_next - x_k).norm();
    let decrease = m_at_next - m_at_k;
    let margin = decrease
        + params.c * params.epsilon * xi_norm
        + params.c * (params.rho_max() * params.epsilon).sqrt() * xi_norm * xi_norm;

    Condition1Report {
        agreement_residual,
        agreement_tol,
        agreement_pass: agreement_residual <= agreement_tol,
        decrease,
        margin,
        decrease_pass: margin < 0.0,
    }
}

/// Configuration for [`run_outer`].
#[derive(Debug, Clone)]
pub struct OuterConfig {
    pub params: SubmodelParams,
    pub s_batch: usize,
    pub delta: f64,
    pub k_outer: usize,
    /// Every agent starts at this constant (agreement by construction).
    pub x0: f64,
    pub master_seed: u64,
    pub inner: InnerOptions,
    pub subsolver: SubsolverConfig,
    pub strict_common_x: bool,
    /// Stop early once the outer step norm falls below this (0 disables).
    pub stop_step_norm: f64,
    /// Abort when condition (ii) fails *hard* in more than this fraction of
    /// iterations (checked once `cond1_min_iters` have run). A failure is
    /// hard when the margin exceeds `cond1_hard_margin_rel * (1 + |F_S|)`:
    /// tiny positive margins are expected at a converged plateau (no
    /// subsolver strictly decreases a submodel at its constrained
    /// minimizer), while large ones signal mis-tuned c, epsilon, or
    /// subsolver budget.
    pub cond1_max_fail_fraction: f64,
    pub cond1_min_iters: usize,
    pub cond1_hard_margin_rel: f64,
    /// Directory for per-solve inner trace CSVs (disabled when `None`).
    pub trace_dir: Option<PathBuf>,
}

impl OuterConfig {
    pub fn new(
        params: SubmodelParams,
        s_batch: usize,
        delta: f64,
        k_outer: usize,
        seed: u64,
    ) -> Self {
        Self {
            params,
            s_batch,
            delta,
            k_outer,
            x0: 0.0,
            master_seed: seed,
            inner: InnerOptions::default(),
            subsolver: SubsolverConfig::default(),
            strict_common_x: false,
            stop_step_norm: 0.0,
            cond1_max_fail_fraction: 0.5,
            cond1_min_iters: 10,
            cond1_hard_margin_rel: 1e-3,
            trace_dir: None,
        }
    }
}

/// Per-iteration record of the outer loop.
#[derive(Debug, Clone)]
pub struct OuterRecord {
    pub k: usize,
    /// Batch objective `F_S(x^k)`.
    pub f_batch: f64,
    pub disagreement: f64,
    pub step_norm: f64,
    pub subsolver_iters: usize,
    pub inner_iters_mean: f64,
    pub inner_iters_max: usize,
    pub inner_drift_max: f64,
    pub chi_checksum: f64,
    pub cond1: Condition1Report,
    pub wall_ms: f64,
}

/// Full outer-loop history: `xs[k]` is the iterate entering iteration `k`
/// (`xs.len() == records.len() + 1`).
#[derive(Debug, Clone, Default)]
pub struct OuterTrajectory {
    pub xs: Vec<DVector<f64>>,
    pub records: Vec<OuterRecord>,
}

/// An outer run that aborted, carrying whatever history accumulated.
#[derive(Debug, Error)]
#[error("{kind}")]
pub struct OuterFailure {
    pub kind: OuterError,
    pub partial: OuterTrajectory,
}

/// Run the full outer loop: batch assembly, empirical derivatives,
/// subsolve, condition check, record.
pub fn run_outer(
    scenario: &ScenarioBundle,
    graph: &Graph,
    config: &OuterConfig,
) -> Result<OuterTrajectory, Box<OuterFailure>> {
    let (n, d) = (scenario.n, scenario.d);
    let nd = n * d;
    let agreement_tol = 1e-4 * (nd as f64).sqrt();
    let w = crate::graph::mixing_matrix(graph, d);

    let mut x = DVector::from_element(nd, config.x0);
    let mut trajectory = OuterTrajectory {
        xs: vec![x.clone()],
        records: Vec::with_capacity(config.k_outer),
    };
    let mut cond1_failures = 0usize;

    for k in 0..config.k_outer {
        let started = Instant::now();
        let fail = |kind: OuterError, partial: &OuterTrajectory| {
            Box::new(OuterFailure {
                kind,
                partial: partial.clone(),
            })
        };

        let batch = match assemble_batch(
            scenario,
            graph,
            &x,
            config.s_batch,
            config.delta,
            config.master_seed,
            k,
            &config.inner,
            config.strict_common_x,
            config.trace_dir.as_deref(),
        ) {
            Ok(b) => b,
            Err(e) => return Err(fail(e, &trajectory)),
        };

        let f_sk = batch_objective(&batch, &x, scenario);
        let (g, h) = empirical_derivatives(&batch, &x, scenario);

        let outcome = match dgd_subsolve(&config.params, &x, &w, &g, &h, &config.subsolver) {
            Ok(o) => o,
            Err(e) => return Err(fail(e, &trajectory)),
        };

        let (m_next, _) = submodel_eval(&config.params, &outcome.x_next, &x, &g, &h, f_sk);
        let cond1 = check_condition1(
            &x,
            &outcome.x_next,
            m_next,
            f_sk,
            &config.params,
            graph,
            d,
            agreement_tol,
        );
        if !cond1.decrease_pass && cond1.margin > config.cond1_hard_margin_rel * (1.0 + f_sk.abs())
        {
            cond1_failures += 1;
        }

        let step_norm = (&outcome.x_next - &x).norm();
        let (inner_iters_mean, inner_iters_max) = batch.iteration_stats();
        trajectory.records.push(OuterRecord {
            k,
            f_batch: f_sk,
            disagreement: disagreement(&x, n, d),
            step_norm,
            subsolver_iters: outcome.iterations,
            inner_iters_mean,
            inner_iters_max,
            inner_drift_max: batch.max_budget_drift(),
            chi_checksum: batch.chi_checksum(),
            cond1,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        x = outcome.x_next;
        trajectory.xs.push(x.clone());

        let done = k + 1;
        if done >= config.cond1_min_iters
            && (cond1_failures as f64) > config.cond1_max_fail_fraction * done as f64
        {
            return Err(Box::new(OuterFailure {
                kind: OuterError::Condition1Failures {
                    failed: cond1_failures,
                    total: done,
                },
                partial: trajectory,
            }));
        }

        if config.stop_step_norm > 0.0 && step_norm < config.stop_step_norm {
            break;
        }
    }
    Ok(trajectory)
}
