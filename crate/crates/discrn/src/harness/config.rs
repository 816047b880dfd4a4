//! Experiment configuration: TOML schema, validation with field-level
//! diagnostics, and construction of the scenario/graph/solver objects.

use crate::graph::{build_graph, random_connected_graph, Graph, GraphError};
use crate::inner::InnerOptions;
use crate::outer::{AnalysisConstants, OuterConfig, SubmodelKind, SubmodelParams, SubsolverConfig};
use crate::problem::{
    make_ev_tou_scenario, make_nonconvex_scenario, make_two_driver_example, ScenarioBundle, Weather,
};
use serde::Deserialize;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("graph construction failed: {0}")]
    Graph(#[from] GraphError),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Optimization method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Discrn,
    Gradient,
    Newton,
}

impl Method {
    pub fn parse(name: &str) -> Option<Method> {
        match name {
            "discrn" | "cubic" => Some(Method::Discrn),
            "gradient" => Some(Method::Gradient),
            "newton" => Some(Method::Newton),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Discrn => "discrn",
            Method::Gradient => "gradient",
            Method::Newton => "newton",
        }
    }

    pub fn submodel_kind(&self) -> SubmodelKind {
        match self {
            Method::Discrn => SubmodelKind::Cubic,
            Method::Gradient => SubmodelKind::Gradient,
            Method::Newton => SubmodelKind::Newton,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    TwoDriver,
    Nonconvex,
    EvTou,
}

// ---------------------------------------------------------------------------
// Raw TOML schema
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: RawExperiment,
    scenario: RawScenario,
    #[serde(default)]
    graph: Option<RawGraph>,
    solver: RawSolver,
    #[serde(default)]
    analysis: Option<AnalysisConstants>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    #[serde(default)]
    name: Option<String>,
    master_seed: u64,
    #[serde(default)]
    k_outer: Option<usize>,
    #[serde(default)]
    eval_samples: Option<usize>,
    methods: Vec<String>,
    #[serde(default)]
    out_dir: Option<PathBuf>,
    #[serde(default)]
    record_wall_ms: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    kind: String,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    horizon: Option<usize>,
    #[serde(default)]
    weather: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    p_ref: Option<f64>,
    /// Replace every marginal with a point mass (deterministic runs).
    #[serde(default)]
    dirac: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    #[serde(default)]
    file: Option<PathBuf>,
    #[serde(default)]
    edges: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    #[serde(default)]
    delta: Option<f64>,
    #[serde(default)]
    batch_size: Option<usize>,
    #[serde(default)]
    rho: Option<f64>,
    #[serde(default)]
    eta_g: Option<f64>,
    #[serde(default)]
    eta_h: Option<f64>,
    #[serde(default)]
    c: Option<f64>,
    #[serde(default)]
    epsilon: Option<f64>,
    #[serde(default)]
    x0: Option<f64>,
    #[serde(default)]
    inner_max_iters: Option<usize>,
    #[serde(default)]
    subsolver_tol: Option<f64>,
    #[serde(default)]
    subsolver_max_iters: Option<usize>,
    #[serde(default)]
    subsolver_r_min: Option<f64>,
    #[serde(default)]
    subsolver_r_max: Option<f64>,
    #[serde(default)]
    stop_step_norm: Option<f64>,
    #[serde(default)]
    strict_common_x: Option<bool>,
    #[serde(default)]
    cond1_max_fail_fraction: Option<f64>,
}

// ---------------------------------------------------------------------------
// Validated configuration
// ---------------------------------------------------------------------------

/// Fully validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub master_seed: u64,
    pub k_outer: usize,
    pub eval_samples: usize,
    pub methods: Vec<Method>,
    pub out_dir: Option<PathBuf>,
    /// When false, the `wall_ms` CSV column is written as zero so repeated
    /// runs produce byte-identical outputs.
    pub record_wall_ms: bool,

    pub scenario_kind: ScenarioKind,
    pub n: usize,
    pub horizon: usize,
    pub weather: Weather,
    pub scenario_seed: u64,
    pub p_ref_override: Option<f64>,
    pub dirac: Option<f64>,

    pub graph_file: Option<PathBuf>,
    pub graph_edges: usize,
    pub graph_seed: u64,

    pub delta: f64,
    pub batch_size: usize,
    pub rho: f64,
    pub eta_g: f64,
    pub eta_h: f64,
    pub c: f64,
    pub epsilon: f64,
    pub x0: f64,
    pub inner_max_iters: usize,
    pub subsolver_tol: f64,
    pub subsolver_max_iters: usize,
    pub subsolver_r_min: f64,
    pub subsolver_r_max: f64,
    pub stop_step_norm: f64,
    pub strict_common_x: bool,
    pub cond1_max_fail_fraction: f64,

    pub analysis: Option<AnalysisConstants>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        Self::validate(raw)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    fn validate(raw: RawConfig) -> Result<Self, ConfigError> {
        let kind = match raw.scenario.kind.as_str() {
            "two_driver" => ScenarioKind::TwoDriver,
            "nonconvex" => ScenarioKind::Nonconvex,
            "ev_tou" => ScenarioKind::EvTou,
            other => {
                return Err(invalid(
                    "scenario.kind",
                    format!(
                        "unknown scenario '{other}' (expected two_driver | nonconvex | ev_tou)"
                    ),
                ))
            }
        };

        if raw.experiment.methods.is_empty() {
            return Err(invalid(
                "experiment.methods",
                "method list must be nonempty",
            ));
        }
        let mut methods = Vec::new();
        for name in &raw.experiment.methods {
            let m = Method::parse(name).ok_or_else(|| {
                invalid(
                    "experiment.methods",
                    format!("unknown method '{name}' (expected discrn | gradient | newton)"),
                )
            })?;
            if methods.contains(&m) {
                return Err(invalid(
                    "experiment.methods",
                    format!("method '{name}' listed twice"),
                ));
            }
            methods.push(m);
        }

        let n = raw.scenario.n.unwrap_or(match kind {
            ScenarioKind::TwoDriver => 2,
            ScenarioKind::Nonconvex => 40,
            ScenarioKind::EvTou => 25,
        });
        if kind == ScenarioKind::TwoDriver && n != 2 {
            return Err(invalid(
                "scenario.n",
                "the two-driver scenario is fixed at n = 2",
            ));
        }
        if n < 2 {
            return Err(invalid("scenario.n", "need at least 2 agents"));
        }
        let horizon = raw.scenario.horizon.unwrap_or(60);
        if horizon == 0 {
            return Err(invalid("scenario.horizon", "horizon must be at least 1"));
        }
        if kind != ScenarioKind::EvTou && raw.scenario.horizon.is_some() {
            return Err(invalid(
                "scenario.horizon",
                "horizon only applies to the ev_tou scenario",
            ));
        }
        let weather = match raw.scenario.weather.as_deref() {
            None | Some("sunny") => Weather::Sunny,
            Some("cloudy") => Weather::Cloudy,
            Some(other) => {
                return Err(invalid(
                    "scenario.weather",
                    format!("unknown weather '{other}' (expected sunny | cloudy)"),
                ))
            }
        };
        if let Some(v) = raw.scenario.dirac {
            if !v.is_finite() {
                return Err(invalid("scenario.dirac", "value must be finite"));
            }
        }

        // Graph: two_driver defaults to the connected pair; everything else
        // needs an explicit edge count or file.
        let (graph_file, graph_edges, graph_seed) = match raw.graph {
            Some(g) => {
                if g.file.is_some() && (g.edges.is_some() || g.seed.is_some()) {
                    return Err(invalid(
                        "graph",
                        "specify either file or (edges, seed), not both",
                    ));
                }
                match g.file {
                    Some(f) => (Some(f), 0, 0),
                    None => {
                        let m = g
                            .edges
                            .ok_or_else(|| invalid("graph.edges", "missing edge count"))?;
                        (None, m, g.seed.unwrap_or(0))
                    }
                }
            }
            None => {
                if kind == ScenarioKind::TwoDriver {
                    (None, 1, 0)
                } else {
                    return Err(invalid("graph", "missing [graph] section"));
                }
            }
        };

        // Regularization defaults follow the reference configurations of
        // each scenario.
        let (rho_default, eta_g_default, eta_h_default) = match kind {
            ScenarioKind::Nonconvex => (50.0, 100.0, 50.0),
            ScenarioKind::EvTou => (0.1, 500.0, 1000.0),
            ScenarioKind::TwoDriver => (1.0, 10.0, 10.0),
        };

        let cfg = ExperimentConfig {
            name: raw
                .experiment
                .name
                .unwrap_or_else(|| format!("{}_{}", raw.scenario.kind, raw.experiment.master_seed)),
            master_seed: raw.experiment.master_seed,
            k_outer: raw.experiment.k_outer.unwrap_or(100),
            eval_samples: raw.experiment.eval_samples.unwrap_or(500),
            methods,
            out_dir: raw.experiment.out_dir,
            record_wall_ms: raw.experiment.record_wall_ms.unwrap_or(true),
            scenario_kind: kind,
            n,
            horizon,
            weather,
            scenario_seed: raw.scenario.seed.unwrap_or(0),
            p_ref_override: raw.scenario.p_ref,
            dirac: raw.scenario.dirac,
            graph_file,
            graph_edges,
            graph_seed,
            delta: raw.solver.delta.unwrap_or(0.1),
            batch_size: raw.solver.batch_size.unwrap_or(20),
            rho: raw.solver.rho.unwrap_or(rho_default),
            eta_g: raw.solver.eta_g.unwrap_or(eta_g_default),
            eta_h: raw.solver.eta_h.unwrap_or(eta_h_default),
            c: raw.solver.c.unwrap_or(1e-6),
            epsilon: raw.solver.epsilon.unwrap_or(1e-2),
            x0: raw.solver.x0.unwrap_or(0.0),
            inner_max_iters: raw.solver.inner_max_iters.unwrap_or(1_000_000),
            subsolver_tol: raw.solver.subsolver_tol.unwrap_or(1e-6),
            subsolver_max_iters: raw.solver.subsolver_max_iters.unwrap_or(50_000),
            subsolver_r_min: raw.solver.subsolver_r_min.unwrap_or(1e-3),
            subsolver_r_max: raw.solver.subsolver_r_max.unwrap_or(10.0),
            stop_step_norm: raw.solver.stop_step_norm.unwrap_or(0.0),
            strict_common_x: raw.solver.strict_common_x.unwrap_or(false),
            cond1_max_fail_fraction: raw.solver.cond1_max_fail_fraction.unwrap_or(0.5),
            analysis: raw.analysis,
        };

        for (field, value) in [
            ("solver.delta", cfg.delta),
            ("solver.rho", cfg.rho),
            ("solver.eta_g", cfg.eta_g),
            ("solver.eta_h", cfg.eta_h),
            ("solver.c", cfg.c),
            ("solver.epsilon", cfg.epsilon),
            ("solver.subsolver_tol", cfg.subsolver_tol),
        ] {
            // NaN-safe positivity check
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(value > 0.0) {
                return Err(invalid(field, format!("must be positive, got {value}")));
            }
        }
        if cfg.batch_size == 0 {
            return Err(invalid(
                "solver.batch_size",
                "batch size must be at least 1",
            ));
        }
        if cfg.eval_samples == 0 {
            return Err(invalid(
                "experiment.eval_samples",
                "need at least 1 evaluation sample",
            ));
        }
        if !(0.0..=1.0).contains(&cfg.cond1_max_fail_fraction) {
            return Err(invalid(
                "solver.cond1_max_fail_fraction",
                "must lie in [0, 1]",
            ));
        }
        Ok(cfg)
    }

    /// Instantiate the scenario (with any distribution/budget overrides).
    pub fn build_scenario(&self) -> ScenarioBundle {
        let mut bundle = match self.scenario_kind {
            ScenarioKind::TwoDriver => make_two_driver_example(self.weather),
            ScenarioKind::Nonconvex => make_nonconvex_scenario(self.n, self.scenario_seed),
            ScenarioKind::EvTou => make_ev_tou_scenario(self.n, self.horizon, self.scenario_seed),
        };
        if let Some(p_ref) = self.p_ref_override {
            bundle.p_ref = p_ref;
        }
        if let Some(value) = self.dirac {
            bundle = bundle.with_dirac(value);
        }
        bundle
    }

    /// Instantiate the communication graph and check it matches the
    /// scenario's agent count.
    pub fn build_graph(&self) -> Result<Graph, ConfigError> {
        let graph = match &self.graph_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                    path: path.clone(),
                    source,
                })?;
                Graph::from_edge_list_str(&text)?
            }
            None => {
                if self.graph_edges == 1 && self.n == 2 {
                    build_graph(2, &[(1, 2)])?
                } else {
                    random_connected_graph(self.n, self.graph_edges, self.graph_seed)?
                }
            }
        };
        if graph.n() != self.n {
            return Err(invalid(
                "graph",
                format!(
                    "graph has {} nodes but the scenario has {}",
                    graph.n(),
                    self.n
                ),
            ));
        }
        Ok(graph)
    }

    /// Outer-loop configuration for one method.
    pub fn outer_config(&self, method: Method, trace_dir: Option<PathBuf>) -> OuterConfig {
        OuterConfig {
            params: SubmodelParams::uniform(
                method.submodel_kind(),
                self.n,
                self.rho,
                self.eta_g,
                self.eta_h,
                self.c,
                self.epsilon,
            ),
            s_batch: self.batch_size,
            delta: self.delta,
            k_outer: self.k_outer,
            x0: self.x0,
            master_seed: self.master_seed,
            inner: InnerOptions {
                max_iters: self.inner_max_iters,
                ..Default::default()
            },
            subsolver: SubsolverConfig {
                tol: self.subsolver_tol,
                max_iters: self.subsolver_max_iters,
                r_min: self.subsolver_r_min,
                r_max: self.subsolver_r_max,
                ..Default::default()
            },
            strict_common_x: self.strict_common_x,
            stop_step_norm: self.stop_step_norm,
            cond1_max_fail_fraction: self.cond1_max_fail_fraction,
            cond1_min_iters: 10,
            cond1_hard_margin_rel: 1e-3,
            trace_dir,
        }
    }
}
