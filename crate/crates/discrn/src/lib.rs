//! Nested distributed stochastic optimization: a cubic-regularized Newton
//! outer loop over an empirical-risk objective whose samples are inexact
//! solutions of a distributed resource-allocation inner problem.
//!
//! The crate is organized around the pipeline:
//!
//! - [`graph`]: communication topology, Laplacian spectrum, mixing matrix;
//! - [`problem`]: cost models, sampling distributions, and the concrete
//!   scenarios (two-driver example, synthetic nonconvex, EV time-of-use);
//! - [`inner`]: Laplacian-flow allocation solver with a locally checkable
//!   stopping criterion, plus the KKT oracle;
//! - [`outer`]: batch assembly, empirical derivatives, the cubic /
//!   gradient / Newton submodels, the decentralized-gradient subsolver,
//!   and the full outer loop;
//! - [`harness`]: experiment configuration, metrics, CSV emission, and
//!   method comparison. The `discrn` binary is a thin CLI over it.

pub mod graph;
pub mod harness;
pub mod inner;
pub mod outer;
pub mod problem;
pub mod rng;
pub mod util;

pub use graph::{build_graph, mixing_matrix, random_connected_graph, Graph, GraphError};
pub use inner::{
    feasible_init, inner_step_size, kkt_oracle, laplacian_flow_step, solve_inner, InnerError,
    InnerInstance, InnerOptions, InnerResult, StepSizeMode,
};
pub use problem::{
    make_ev_tou_scenario, make_nonconvex_scenario, make_two_driver_example, sample_chi, CostModel,
    DistributionSpec, Marginal, ScenarioBundle, Weather,
};
