//! Synthetic nonconvex scenario: costs quadratic in the allocation with
//! quartic-in-`x` curvature and (possibly nonconvex) quadratic-in-`x`
//! linear term.
//!
//! `f_i(x, p_i) = alpha_i(x) p_i^2 / 2 + beta_i(x) p_i` where
//! `alpha_i(x) = a_i1 (x - z_i1)(x - z_i2)(x - z_i3)(x - z_i4) + a_i2` and
//! `beta_i(x) = b_i1 (x - z_i5)(x - z_i6)`. The offset `a_i2` is chosen so
//! that `min_x alpha_i(x) = omega_i > 0`, keeping the allocation problem
//! strongly convex at every `x`.

use super::{poly, CostModel, DistributionSpec, Instance, ScenarioBundle, ScenarioParams};
use crate::rng::{self, domain};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const SCENARIO_TAG: u64 = 1;

// per-agent coefficient stream indices
const COEF_A1: u64 = 0;
const COEF_Z: [u64; 4] = [1, 2, 3, 4];
const COEF_OMEGA: u64 = 5;
const COEF_B1: u64 = 6;
const COEF_Z5: u64 = 7;
const COEF_Z6: u64 = 8;

/// Sampled coefficients for one agent of the nonconvex scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonconvexAgent {
    pub a1: f64,
    pub a2: f64,
    pub z: [f64; 6],
    pub b1: f64,
    /// Global minimum of `alpha_i` over the real line (strong-convexity
    /// modulus of the allocation problem at the worst `x`).
    pub omega: f64,
}

struct AgentPolys {
    alpha: Vec<f64>,
    dalpha: Vec<f64>,
    ddalpha: Vec<f64>,
    beta: Vec<f64>,
    dbeta: Vec<f64>,
    ddbeta: Vec<f64>,
    rho_box: f64,
}

/// Nonconvex scenario cost model (`d = 1`).
pub struct NonconvexCost {
    agents: Vec<NonconvexAgent>,
    polys: Vec<AgentPolys>,
}

impl NonconvexCost {
    pub fn new(agents: Vec<NonconvexAgent>) -> Self {
        let polys = agents.iter().map(AgentPolys::from_agent).collect();
        Self { agents, polys }
    }

    pub fn agent_params(&self) -> &[NonconvexAgent] {
        &self.agents
    }

    /// Curvature `alpha_i(x)` of the allocation cost at `x`.
    pub fn alpha(&self, i: usize, x: f64) -> f64 {
        poly::eval(&self.polys[i].alpha, x)
    }

    /// Linear coefficient `beta_i(x)` of the allocation cost at `x`.
    pub fn beta(&self, i: usize, x: f64) -> f64 {
        poly::eval(&self.polys[i].beta, x)
    }
}

impl AgentPolys {
    fn from_agent(a: &NonconvexAgent) -> Self {
        let mut alpha = poly::from_roots(&a.z[..4]);
        for c in alpha.iter_mut() {
            *c *= a.a1;
        }
        alpha[0] += a.a2;
        let dalpha = poly::derivative(&alpha);
        let ddalpha = poly::derivative(&dalpha);
        let dddalpha = poly::derivative(&ddalpha);

        let mut beta = poly::from_roots(&a.z[4..6]);
        for c in beta.iter_mut() {
            *c *= a.b1;
        }
        let dbeta = poly::derivative(&beta);
        let ddbeta = poly::derivative(&dbeta);

        // Operating-box bound on the Lipschitz constant of hess_xx f in x
        // (x in [-3, 3], |p| <= 10): |alpha'''| is affine, so its max is at
        // an endpoint.
        let d3 = poly::eval(&dddalpha, -3.0)
            .abs()
            .max(poly::eval(&dddalpha, 3.0).abs());
        let rho_box = 0.5 * d3 * 100.0;

        Self {
            alpha,
            dalpha,
            ddalpha,
            beta,
            dbeta,
            ddbeta,
            rho_box,
        }
    }
}

impl CostModel for NonconvexCost {
    fn agents(&self) -> usize {
        self.agents.len()
    }

    fn dim(&self) -> usize {
        1
    }

    fn value(&self, i: usize, x_i: &[f64], p_i: f64) -> f64 {
        let x = x_i[0];
        0.5 * self.alpha(i, x) * p_i * p_i + self.beta(i, x) * p_i
    }

    fn dp(&self, i: usize, x_i: &[f64], p_i: f64) -> f64 {
        let x = x_i[0];
        self.alpha(i, x) * p_i + self.beta(i, x)
    }

    fn dpp(&self, i: usize, x_i: &[f64], _p_i: f64) -> f64 {
        self.alpha(i, x_i[0])
    }

    fn grad_x(&self, i: usize, x_i: &[f64], p_i: f64) -> DVector<f64> {
        let x = x_i[0];
        let p = &self.polys[i];
        let g = 0.5 * poly::eval(&p.dalpha, x) * p_i * p_i + poly::eval(&p.dbeta, x) * p_i;
        DVector::from_element(1, g)
    }

    fn hess_x(&self, i: usize, x_i: &[f64], p_i: f64) -> DMatrix<f64> {
        let x = x_i[0];
        let p = &self.polys[i];
        let h = 0.5 * poly::eval(&p.ddalpha, x) * p_i * p_i + poly::eval(&p.ddbeta, x) * p_i;
        DMatrix::from_element(1, 1, h)
    }

    fn p_linear_profile(&self, i: usize, x_i: &[f64]) -> Option<(f64, f64)> {
        let x = x_i[0];
        Some((self.alpha(i, x), self.beta(i, x)))
    }

    fn hess_lipschitz(&self, i: usize) -> f64 {
        self.polys[i].rho_box
    }
}

fn draw_uniform(seed: u64, agent: u64, coef: u64, a: f64, b: f64) -> f64 {
    let mut r = rng::stream(seed, &[domain::SCENARIO, SCENARIO_TAG, agent, coef]);
    a + (b - a) * r.gen::<f64>()
}

/// Global minimum over the real line of `a1 * prod (x - z_j)`.
///
/// The leading coefficient is positive, so the minimum is attained at one of
/// the (real, by root interlacing) critical points.
fn quartic_min(a1: f64, roots: &[f64]) -> f64 {
    let monic = poly::from_roots(roots);
    let crit = poly::real_roots(&poly::derivative(&monic));
    assert!(
        !crit.is_empty(),
        "quartic with real roots must have real critical points"
    );
    crit.iter()
        .map(|&x| a1 * poly::eval(&monic, x))
        .fold(f64::INFINITY, f64::min)
}

/// Build the synthetic nonconvex scenario: `n` agents, coefficients drawn
/// from per-(agent, coefficient) streams of `seed`.
///
/// `P_ref` defaults to `n` (the reference configuration uses `n = 40` with
/// `P_ref = 40`); override through the experiment configuration if needed.
pub fn make_nonconvex_scenario(n: usize, seed: u64) -> ScenarioBundle {
    assert!(n >= 2, "scenario requires at least 2 agents");
    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let ai = i as u64;
        let a1 = draw_uniform(seed, ai, COEF_A1, 0.5, 1.5);
        let z1 = draw_uniform(seed, ai, COEF_Z[0], -2.0, -1.0);
        let z2 = draw_uniform(seed, ai, COEF_Z[1], -1.0, 0.0);
        let z3 = draw_uniform(seed, ai, COEF_Z[2], 0.0, 1.0);
        let z4 = draw_uniform(seed, ai, COEF_Z[3], 1.0, 2.0);
        let omega = draw_uniform(seed, ai, COEF_OMEGA, 1.0, 5.0);
        let b1 = draw_uniform(seed, ai, COEF_B1, -1.0, 1.0);
        let z5 = draw_uniform(seed, ai, COEF_Z5, -2.0, 0.0);
        let z6 = draw_uniform(seed, ai, COEF_Z6, 0.0, 2.0);

        let a2 = omega - quartic_min(a1, &[z1, z2, z3, z4]);
        agents.push(NonconvexAgent {
            a1,
            a2,
            z: [z1, z2, z3, z4, z5, z6],
            b1,
            omega,
        });
    }

    ScenarioBundle {
        instances: vec![Instance {
            model: Arc::new(NonconvexCost::new(agents.clone())),
            weight: 1.0,
        }],
        dist: DistributionSpec::uniform_iid(n, 0.0, 1.5).expect("valid range"),
        p_ref: n as f64,
        n,
        d: 1,
        params: ScenarioParams::Nonconvex { seed, agents },
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::{assert_rel_close, central_diff};
    use super::*;
    use crate::rng;

    fn model(n: usize, seed: u64) -> NonconvexCost {
        let bundle = make_nonconvex_scenario(n, seed);
        let agents = match &bundle.params {
            ScenarioParams::Nonconvex { agents, .. } => agents.clone(),
            _ => unreachable!(),
        };
        NonconvexCost::new(agents)
    }

    #[test]
    fn roots_drawn_in_stated_ranges() {
        let m = model(20, 42);
        for a in m.agent_params() {
            assert!((0.5..=1.5).contains(&a.a1));
            assert!((-2.0..=-1.0).contains(&a.z[0]));
            assert!((-1.0..=0.0).contains(&a.z[1]));
            assert!((0.0..=1.0).contains(&a.z[2]));
            assert!((1.0..=2.0).contains(&a.z[3]));
            assert!((-1.0..=1.0).contains(&a.b1));
            assert!((1.0..=5.0).contains(&a.omega));
        }
    }

    #[test]
    fn alpha_minimum_equals_omega() {
        // Independent check: dense grid plus local refinement. All critical
        // points lie between the extreme roots, so [-2.5, 2.5] suffices.
        let m = model(10, 7);
        for (i, a) in m.agent_params().iter().enumerate() {
            let mut best = f64::INFINITY;
            let mut best_x = 0.0;
            let steps = 50_000;
            for k in 0..=steps {
                let x = -2.5 + 5.0 * k as f64 / steps as f64;
                let v = m.alpha(i, x);
                if v < best {
                    best = v;
                    best_x = x;
                }
            }
            // parabolic refinement
            let h = 5.0 / steps as f64;
            for _ in 0..40 {
                let (fm, f0, fp) = (
                    m.alpha(i, best_x - h),
                    m.alpha(i, best_x),
                    m.alpha(i, best_x + h),
                );
                let denom = fm - 2.0 * f0 + fp;
                if denom.abs() > 0.0 {
                    best_x += 0.5 * h * (fm - fp) / denom;
                }
            }
            let min_alpha = m.alpha(i, best_x);
            assert!(
                (min_alpha - a.omega).abs() <= 1e-6,
                "agent {i}: min alpha {min_alpha} vs omega {}",
                a.omega
            );
        }
    }

    #[test]
    fn curvature_independent_of_allocation() {
        let m = model(5, 3);
        for &p in &[-4.0, 0.0, 9.0] {
            assert_eq!(m.dpp(2, &[0.8], p), m.alpha(2, 0.8));
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let m = model(6, 11);
        let mut r = rng::stream(0, &[99]);
        for _ in 0..100 {
            let i = r.gen_range(0..6);
            let x = -3.0 + 6.0 * r.gen::<f64>();
            let p = -10.0 + 20.0 * r.gen::<f64>();

            let fd_dp = central_diff(|pp| m.value(i, &[x], pp), p, 1e-6);
            assert_rel_close(m.dp(i, &[x], p), fd_dp, 1e-5, "dp");

            let fd_gx = central_diff(|xx| m.value(i, &[xx], p), x, 1e-6);
            assert_rel_close(m.grad_x(i, &[x], p)[0], fd_gx, 1e-5, "grad_x");

            let fd_dpp = central_diff(|pp| m.dp(i, &[x], pp), p, 1e-5);
            assert_rel_close(m.dpp(i, &[x], p), fd_dpp, 1e-4, "dpp");

            let fd_hx = central_diff(|xx| m.grad_x(i, &[xx], p)[0], x, 1e-5);
            assert_rel_close(m.hess_x(i, &[x], p)[(0, 0)], fd_hx, 1e-4, "hess_x");
        }
    }

    #[test]
    fn strong_convexity_witness() {
        let m = model(8, 21);
        let mut r = rng::stream(1, &[98]);
        for _ in 0..1000 {
            let i = r.gen_range(0..8);
            let x = -3.0 + 6.0 * r.gen::<f64>();
            let omega = m.agent_params()[i].omega;
            assert!(m.dpp(i, &[x], 0.0) >= omega - 1e-9);
        }
    }

    #[test]
    fn seed_determinism_bit_for_bit() {
        let a = make_nonconvex_scenario(12, 5);
        let b = make_nonconvex_scenario(12, 5);
        match (&a.params, &b.params) {
            (
                ScenarioParams::Nonconvex { agents: x, .. },
                ScenarioParams::Nonconvex { agents: y, .. },
            ) => assert_eq!(x, y),
            _ => unreachable!(),
        }
    }

    #[test]
    fn p_ref_tracks_agent_count() {
        assert_eq!(make_nonconvex_scenario(40, 1).p_ref, 40.0);
    }
}
