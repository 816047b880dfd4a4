//! EV charging scenario over a time horizon with time-of-use pricing.
//!
//! At each step `l` the per-user cost is
//! `f_i^l(x, p_i) = a_i P_l p_i^2 + b_i P_l p_i + c_i (p_i - p_min_i - d_i x)^2`:
//! an economic charging cost under price `P_l` plus a preference term that
//! the incentive `x` can shift. One incentive applies across the whole
//! horizon; each (sample, step) pair is an independent allocation instance
//! and the outer objective averages over the horizon.

use super::{CostModel, DistributionSpec, Instance, ScenarioBundle, ScenarioParams};
use crate::rng::{self, domain};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const SCENARIO_TAG: u64 = 2;

const COEF_A: u64 = 0;
const COEF_B: u64 = 1;
const COEF_C: u64 = 2;
const COEF_D: u64 = 3;
const COEF_PMIN: u64 = 4;

/// Time-of-use price at 1-based step `l`: 2 off-peak, 4 peak, 1 overnight.
pub fn price_signal(l: usize) -> f64 {
    assert!(l >= 1, "price signal is 1-based");
    if l <= 20 {
        2.0
    } else if l <= 40 {
        4.0
    } else {
        1.0
    }
}

/// Battery and preference constants for one EV user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvAgent {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub p_min: f64,
}

/// Cost model for a single time step (fixed price).
pub struct EvTouCost {
    agents: Arc<Vec<EvAgent>>,
    price: f64,
}

impl EvTouCost {
    pub fn new(agents: Arc<Vec<EvAgent>>, price: f64) -> Self {
        Self { agents, price }
    }

    pub fn price(&self) -> f64 {
        self.price
    }
}

impl CostModel for EvTouCost {
    fn agents(&self) -> usize {
        self.agents.len()
    }

    fn dim(&self) -> usize {
        1
    }

    fn value(&self, i: usize, x_i: &[f64], p_i: f64) -> f64 {
        let a = &self.agents[i];
        let pref = p_i - a.p_min - a.d * x_i[0];
        a.a * self.price * p_i * p_i + a.b * self.price * p_i + a.c * pref * pref
    }

    fn dp(&self, i: usize, x_i: &[f64], p_i: f64) -> f64 {
        let a = &self.agents[i];
        2.0 * a.a * self.price * p_i + a.b * self.price + 2.0 * a.c * (p_i - a.p_min - a.d * x_i[0])
    }

    fn dpp(&self, i: usize, _x_i: &[f64], _p_i: f64) -> f64 {
        let a = &self.agents[i];
        2.0 * a.a * self.price + 2.0 * a.c
    }

    fn grad_x(&self, i: usize, x_i: &[f64], p_i: f64) -> DVector<f64> {
        let a = &self.agents[i];
        DVector::from_element(1, -2.0 * a.c * a.d * (p_i - a.p_min - a.d * x_i[0]))
    }

    fn hess_x(&self, i: usize, _x_i: &[f64], _p_i: f64) -> DMatrix<f64> {
        let a = &self.agents[i];
        DMatrix::from_element(1, 1, 2.0 * a.c * a.d * a.d)
    }

    fn p_linear_profile(&self, i: usize, x_i: &[f64]) -> Option<(f64, f64)> {
        let a = &self.agents[i];
        Some((
            2.0 * a.a * self.price + 2.0 * a.c,
            a.b * self.price - 2.0 * a.c * (a.p_min + a.d * x_i[0]),
        ))
    }

    fn hess_lipschitz(&self, _i: usize) -> f64 {
        0.0
    }
}

/// Build the EV time-of-use scenario: one cost instance per time step,
/// each weighted `1/horizon` in the outer objective.
pub fn make_ev_tou_scenario(n: usize, horizon: usize, seed: u64) -> ScenarioBundle {
    assert!(n >= 2, "scenario requires at least 2 agents");
    assert!(horizon >= 1, "horizon must be at least 1");
    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let draw = |coef: u64, lo: f64, hi: f64| -> f64 {
            let mut r = rng::stream(seed, &[domain::SCENARIO, SCENARIO_TAG, i as u64, coef]);
            lo + (hi - lo) * r.gen::<f64>()
        };
        agents.push(EvAgent {
            a: draw(COEF_A, 1.0, 3.0),
            b: draw(COEF_B, 1.0, 3.0),
            c: draw(COEF_C, 1.0, 3.0),
            d: draw(COEF_D, 1.0, 3.0),
            p_min: draw(COEF_PMIN, 0.0, 2.0),
        });
    }

    let shared = Arc::new(agents.clone());
    let weight = 1.0 / horizon as f64;
    let instances: Vec<Instance> = (1..=horizon)
        .map(|l| Instance {
            model: Arc::new(EvTouCost::new(Arc::clone(&shared), price_signal(l)))
                as Arc<dyn CostModel>,
            weight,
        })
        .collect();
    let prices: Vec<f64> = (1..=horizon).map(price_signal).collect();

    ScenarioBundle {
        instances,
        dist: DistributionSpec::uniform_iid(n, 0.5, 1.5).expect("valid range"),
        p_ref: 40.0,
        n,
        d: 1,
        params: ScenarioParams::EvTou {
            seed,
            horizon,
            prices,
            agents,
        },
    }
}
