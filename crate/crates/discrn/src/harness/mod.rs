//! Experiment driver: evaluation metrics, method comparison, CSV emission,
//! and seed management.
//!
//! An experiment runs every configured method on the same scenario, graph,
//! and randomness (batch realizations are addressed by `(seed, k, s,
//! instance)` and evaluation realizations by `(seed, m, instance)`, so
//! compared methods consume identical draws). Each method produces one CSV
//! of per-iteration metrics; a TOML summary aggregates final values and
//! iterations-to-plateau.

pub mod config;

pub use config::{ConfigError, ExperimentConfig, Method, ScenarioKind};

use crate::inner::{kkt_oracle, solve_inner, InnerError, InnerInstance, InnerOptions};
pub use crate::outer::disagreement;
use crate::outer::{run_outer, OuterFailure, OuterTrajectory};
use crate::problem::{agent_block, sample_chi, ScenarioBundle};
use crate::rng::{self, domain};
use crate::util::fmt_float;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Column order of the per-method metrics CSV. Row `k` holds the state
/// `x^k`; the step-specific columns describe the update that produced it
/// (all zero in row 0).
pub const CSV_HEADER: &str =
    "k,f_hat,disagreement,subsolver_iters,inner_iters_mean,cond1_margin,wall_ms";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("method {method} aborted: {source}")]
    Outer {
        method: Method,
        #[source]
        source: Box<OuterFailure>,
    },

    #[error("evaluation oracle failed: {0}")]
    Oracle(#[from] InnerError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("cannot parse {path} (line {line}): {reason}")]
    CsvParse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("no method CSV files found in {0}")]
    NoCurves(PathBuf),

    #[error(
        "inner accuracy target exceeded: max ||p~ - p*|| = {max_error:.3e} > delta = {delta:.3e}"
    )]
    AccuracyTarget { max_error: f64, delta: f64 },
}

/// Exit code classification for the CLI: configuration problems are
/// distinguished from numerical failures.
impl HarnessError {
    pub fn is_config_error(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

/// Monte-Carlo estimate of the outer objective at `x`: average over `m_samples`
/// realizations of the exact inner cost `sum_i f_i(x_i, p*_i)`, horizon-averaged
/// for multi-instance scenarios. Uses the KKT oracle, not the inexact solver,
/// so the estimate does not depend on `delta`.
pub fn empirical_f(
    x: &DVector<f64>,
    m_samples: usize,
    scenario: &ScenarioBundle,
    eval_seed: u64,
) -> Result<f64, InnerError> {
    let per_sample: Vec<Result<f64, InnerError>> = (0..m_samples)
        .into_par_iter()
        .map(|m| {
            let mut total = 0.0;
            for (idx, inst) in scenario.instances.iter().enumerate() {
                let mut stream = rng::stream(eval_seed, &[domain::EVAL, m as u64, idx as u64]);
                let chi = sample_chi(&scenario.dist, &mut stream);
                let p_star = kkt_oracle(inst.model.as_ref(), x, &chi, scenario.p_ref)?;
                let mut v = 0.0;
                for i in 0..scenario.n {
                    v += inst
                        .model
                        .value(i, agent_block(x, i, scenario.d), p_star[i]);
                }
                total += inst.weight * v;
            }
            Ok(total)
        })
        .collect();

    // Sequential sum in sample order keeps the result independent of the
    // parallel schedule.
    let mut sum = 0.0;
    for v in per_sample {
        sum += v?;
    }
    Ok(sum / m_samples as f64)
}

/// One method's evaluated trajectory.
#[derive(Debug, Clone)]
pub struct MethodCurve {
    pub method: String,
    pub f_hat: Vec<f64>,
}

/// Plateau statistics for one method.
#[derive(Debug, Clone, Serialize)]
pub struct PlateauEntry {
    pub method: String,
    pub plateau_value: f64,
    /// First iteration whose value is within `tau` of the plateau
    /// (measured as a fraction of the total descent).
    pub iters_to_plateau: usize,
    /// False when the final window has not flattened.
    pub plateau_detected: bool,
    /// Iterations-to-plateau relative to the baseline method.
    pub ratio_vs_baseline: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonSummary {
    pub tau: f64,
    pub baseline: String,
    pub entries: Vec<PlateauEntry>,
}

/// Per-method iterations until the objective first enters within `tau`
/// (relative to total descent) of its final plateau; the plateau is the
/// mean of the final 10% of iterations.
pub fn compare_methods(curves: &[MethodCurve], tau: f64) -> ComparisonSummary {
    let baseline_name = curves
        .iter()
        .find(|c| c.method == "discrn")
        .or(curves.first())
        .map(|c| c.method.clone())
        .unwrap_or_default();

    let stats: Vec<(String, f64, usize, bool)> = curves
        .iter()
        .map(|curve| {
            let f = &curve.f_hat;
            let len = f.len().max(1);
            let window = (len.div_ceil(10)).max(1);
            let plateau = f[len - window..].iter().sum::<f64>() / window as f64;
            let descent = f[0] - plateau;
            let range = f[len - window..]
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            let flat_tol = (tau * descent.abs()).max(1e-12 * plateau.abs().max(1.0));
            let detected = range.1 - range.0 <= flat_tol;
            let iters = if descent <= 0.0 {
                0
            } else {
                f.iter()
                    .position(|&v| v <= plateau + tau * descent)
                    .unwrap_or(len - 1)
            };
            (curve.method.clone(), plateau, iters, detected)
        })
        .collect();

    let base_iters = stats
        .iter()
        .find(|(name, ..)| *name == baseline_name)
        .map(|&(_, _, iters, _)| iters)
        .unwrap_or(0);

    let entries = stats
        .into_iter()
        .map(|(method, plateau_value, iters, detected)| PlateauEntry {
            method,
            plateau_value,
            iters_to_plateau: iters,
            plateau_detected: detected,
            ratio_vs_baseline: if base_iters == 0 {
                if iters == 0 {
                    1.0
                } else {
                    f64::INFINITY
                }
            } else {
                iters as f64 / base_iters as f64
            },
        })
        .collect();

    ComparisonSummary {
        tau,
        baseline: baseline_name,
        entries,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub iterations_run: usize,
    pub final_f_hat: f64,
    pub final_disagreement: f64,
    pub plateau_value: f64,
    pub iters_to_plateau: usize,
    pub plateau_detected: bool,
    pub ratio_vs_baseline: f64,
    pub inner_iters_mean: f64,
    pub subsolver_iters_mean: f64,
    pub cond1_decrease_failures: usize,
    pub wall_ms_total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryHeader {
    pub name: String,
    pub scenario: String,
    pub n: usize,
    pub master_seed: u64,
    pub scenario_seed: u64,
    pub graph_seed: u64,
    pub k_outer: usize,
    pub eval_samples: usize,
    pub x0: f64,
    pub tau: f64,
    pub baseline: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recommended_batch_size: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub experiment: SummaryHeader,
    pub methods: Vec<MethodSummary>,
}

/// Result of one full experiment, with everything the caller might inspect
/// programmatically.
pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub trajectories: Vec<(Method, OuterTrajectory, Vec<f64>)>,
}

fn write_method_csv(
    path: &Path,
    trajectory: &OuterTrajectory,
    f_hat: &[f64],
    n: usize,
    d: usize,
    record_wall_ms: bool,
) -> Result<(), HarnessError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{CSV_HEADER}")?;
    for (k, x) in trajectory.xs.iter().enumerate() {
        let (subsolver_iters, inner_iters_mean, cond1_margin, wall_ms) = if k == 0 {
            (0usize, 0.0, 0.0, 0.0)
        } else {
            let r = &trajectory.records[k - 1];
            (
                r.subsolver_iters,
                r.inner_iters_mean,
                r.cond1.margin,
                if record_wall_ms { r.wall_ms } else { 0.0 },
            )
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            k,
            fmt_float(f_hat[k]),
            fmt_float(disagreement(x, n, d)),
            subsolver_iters,
            fmt_float(inner_iters_mean),
            fmt_float(cond1_margin),
            fmt_float(wall_ms),
        )?;
    }
    Ok(())
}

/// Read back the `f_hat` column of a metrics CSV.
pub fn read_f_hat_csv(path: &Path) -> Result<Vec<f64>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| HarnessError::CsvParse {
        path: path.to_path_buf(),
        line: 1,
        reason: "empty file".into(),
    })?;
    let col = header
        .split(',')
        .position(|c| c == "f_hat")
        .ok_or_else(|| HarnessError::CsvParse {
            path: path.to_path_buf(),
            line: 1,
            reason: "missing f_hat column".into(),
        })?;
    let mut values = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let field = line
            .split(',')
            .nth(col)
            .ok_or_else(|| HarnessError::CsvParse {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: "short row".into(),
            })?;
        values.push(field.parse::<f64>().map_err(|e| HarnessError::CsvParse {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(values)
}

fn evaluate_trajectory(
    trajectory: &OuterTrajectory,
    cfg: &ExperimentConfig,
    scenario: &ScenarioBundle,
) -> Result<Vec<f64>, InnerError> {
    trajectory
        .xs
        .iter()
        .map(|x| empirical_f(x, cfg.eval_samples, scenario, cfg.master_seed))
        .collect()
}

/// Run every configured method with shared randomness, writing one metrics
/// CSV per method plus `params.toml`, `graph.edges`, and `summary.toml`
/// into `out_dir`. Partial CSVs are flushed when a method aborts.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    trace_inner: bool,
) -> Result<ExperimentOutcome, HarnessError> {
    let scenario = cfg.build_scenario();
    let graph = cfg.build_graph()?;

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("params.toml"), scenario.params_toml())?;
    std::fs::write(out_dir.join("graph.edges"), graph.to_edge_list_string())?;

    let mut trajectories: Vec<(Method, OuterTrajectory, Vec<f64>)> = Vec::new();
    for &method in &cfg.methods {
        let trace_dir = if trace_inner {
            let dir = out_dir.join("trace_inner").join(method.name());
            std::fs::create_dir_all(&dir)?;
            Some(dir)
        } else {
            None
        };
        let outer_cfg = cfg.outer_config(method, trace_dir);

        match run_outer(&scenario, &graph, &outer_cfg) {
            Ok(trajectory) => {
                let f_hat = evaluate_trajectory(&trajectory, cfg, &scenario)?;
                write_method_csv(
                    &out_dir.join(format!("{}.csv", method.name())),
                    &trajectory,
                    &f_hat,
                    scenario.n,
                    scenario.d,
                    cfg.record_wall_ms,
                )?;
                trajectories.push((method, trajectory, f_hat));
            }
            Err(failure) => {
                // Flush whatever accumulated before the abort.
                if let Ok(f_hat) = evaluate_trajectory(&failure.partial, cfg, &scenario) {
                    let _ = write_method_csv(
                        &out_dir.join(format!("{}.csv", method.name())),
                        &failure.partial,
                        &f_hat,
                        scenario.n,
                        scenario.d,
                        cfg.record_wall_ms,
                    );
                }
                return Err(HarnessError::Outer {
                    method,
                    source: failure,
                });
            }
        }
    }

    let tau = 0.05;
    let curves: Vec<MethodCurve> = trajectories
        .iter()
        .map(|(m, _, f_hat)| MethodCurve {
            method: m.name().to_string(),
            f_hat: f_hat.clone(),
        })
        .collect();
    let comparison = compare_methods(&curves, tau);

    let methods: Vec<MethodSummary> = trajectories
        .iter()
        .map(|(method, trajectory, f_hat)| {
            let entry = comparison
                .entries
                .iter()
                .find(|e| e.method == method.name())
                .expect("comparison entry");
            let records = &trajectory.records;
            let count = records.len().max(1) as f64;
            MethodSummary {
                method: method.name().to_string(),
                iterations_run: records.len(),
                final_f_hat: *f_hat.last().expect("nonempty trajectory"),
                final_disagreement: disagreement(
                    trajectory.xs.last().expect("nonempty trajectory"),
                    scenario.n,
                    scenario.d,
                ),
                plateau_value: entry.plateau_value,
                iters_to_plateau: entry.iters_to_plateau,
                plateau_detected: entry.plateau_detected,
                ratio_vs_baseline: entry.ratio_vs_baseline,
                inner_iters_mean: records.iter().map(|r| r.inner_iters_mean).sum::<f64>() / count,
                subsolver_iters_mean: records
                    .iter()
                    .map(|r| r.subsolver_iters as f64)
                    .sum::<f64>()
                    / count,
                cond1_decrease_failures: records.iter().filter(|r| !r.cond1.decrease_pass).count(),
                wall_ms_total: if cfg.record_wall_ms {
                    records.iter().map(|r| r.wall_ms).sum()
                } else {
                    0.0
                },
            }
        })
        .collect();

    let summary = ExperimentSummary {
        experiment: SummaryHeader {
            name: cfg.name.clone(),
            scenario: format!("{:?}", cfg.scenario_kind),
            n: scenario.n,
            master_seed: cfg.master_seed,
            scenario_seed: cfg.scenario_seed,
            graph_seed: cfg.graph_seed,
            k_outer: cfg.k_outer,
            eval_samples: cfg.eval_samples,
            x0: cfg.x0,
            tau,
            baseline: comparison.baseline.clone(),
            recommended_batch_size: cfg
                .analysis
                .as_ref()
                .map(|a| a.recommended_batch_size(cfg.epsilon, cfg.rho)),
        },
        methods,
    };

    let summary_text = toml::to_string_pretty(&summary).expect("summary serialize");
    std::fs::write(out_dir.join("summary.toml"), summary_text)?;

    Ok(ExperimentOutcome {
        summary,
        trajectories,
    })
}

/// Compare previously written metrics CSVs found in `dir`.
pub fn compare_dir(dir: &Path, tau: f64) -> Result<ComparisonSummary, HarnessError> {
    let mut curves = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    entries.sort();
    for path in entries {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("unknown")
            .to_string();
        curves.push(MethodCurve {
            method: name,
            f_hat: read_f_hat_csv(&path)?,
        });
    }
    if curves.is_empty() {
        return Err(HarnessError::NoCurves(dir.to_path_buf()));
    }
    Ok(compare_methods(&curves, tau))
}

/// One probe of the inner solver against the KKT oracle.
#[derive(Debug, Clone)]
pub struct OracleCheckRow {
    pub index: usize,
    pub instance: usize,
    pub error: f64,
    pub iterations: usize,
    pub budget_drift: f64,
}

#[derive(Debug, Clone)]
pub struct OracleCheckReport {
    pub delta: f64,
    pub rows: Vec<OracleCheckRow>,
    pub max_error: f64,
    pub mean_iterations: f64,
    pub max_budget_drift: f64,
    pub pass: bool,
}

/// Solve `count` random inner instances of the configured scenario and
/// compare each stopped iterate against the oracle solution.
pub fn oracle_check(
    cfg: &ExperimentConfig,
    count: usize,
) -> Result<OracleCheckReport, HarnessError> {
    let scenario = cfg.build_scenario();
    let graph = cfg.build_graph()?;
    let opts = InnerOptions {
        max_iters: cfg.inner_max_iters,
        ..Default::default()
    };

    let rows: Vec<Result<OracleCheckRow, HarnessError>> = (0..count)
        .into_par_iter()
        .map(|j| {
            use rand::Rng;
            let instance = j % scenario.instances.len();
            let model = scenario.instances[instance].model.as_ref();
            let mut xr = rng::stream(cfg.master_seed, &[domain::PROBE, j as u64, 0]);
            let x_val: f64 = -1.0 + 2.0 * xr.gen::<f64>();
            let x = DVector::from_element(scenario.n * scenario.d, x_val);
            let mut cr = rng::stream(cfg.master_seed, &[domain::PROBE, j as u64, 1]);
            let chi = sample_chi(&scenario.dist, &mut cr);

            let inst = InnerInstance {
                model,
                graph: &graph,
                x: &x,
                chi_hat: &chi,
                p_ref: scenario.p_ref,
            };
            let res = solve_inner(&inst, cfg.delta, &opts).map_err(HarnessError::Oracle)?;
            let p_star =
                kkt_oracle(model, &x, &chi, scenario.p_ref).map_err(HarnessError::Oracle)?;
            Ok(OracleCheckRow {
                index: j,
                instance,
                error: (&res.p_tilde - &p_star).norm(),
                iterations: res.iterations,
                budget_drift: res.max_budget_drift,
            })
        })
        .collect();

    let mut collected = Vec::with_capacity(count);
    for r in rows {
        collected.push(r?);
    }
    let max_error = collected.iter().map(|r| r.error).fold(0.0, f64::max);
    let mean_iterations =
        collected.iter().map(|r| r.iterations as f64).sum::<f64>() / count.max(1) as f64;
    let max_budget_drift = collected.iter().map(|r| r.budget_drift).fold(0.0, f64::max);
    Ok(OracleCheckReport {
        delta: cfg.delta,
        pass: max_error <= cfg.delta,
        rows: collected,
        max_error,
        mean_iterations,
        max_budget_drift,
    })
}
