//! Two-agent illustrative scenario: a pair of EV drivers with PV
//! generators balancing a net-zero tie line.
//!
//! Costs are `f_1(x, p_1) = (2x + p_1 - 1)^2` and
//! `f_2(x, p_2) = (x + p_2 - 2)^2` with `P_ref = 0`. On a sunny day both
//! generators deterministically produce 1.5; on a cloudy day output is
//! uniform on `[0, 1.5]`.

use super::{CostModel, DistributionSpec, Instance, Marginal, ScenarioBundle, ScenarioParams};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Weather forecast selecting the PV output distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weather {
    Sunny,
    Cloudy,
}

/// Fixed two-agent quadratic cost model (`d = 1`).
#[derive(Debug, Clone, Copy, Default)]
pub struct TwoDriverCost;

impl TwoDriverCost {
    // residual r_i and the x-coefficient of each squared term
    fn residual(i: usize, x: f64, p: f64) -> (f64, f64) {
        match i {
            0 => (2.0 * x + p - 1.0, 2.0),
            1 => (x + p - 2.0, 1.0),
            _ => panic!("two-driver model has 2 agents, got index {i}"),
        }
    }
}

impl CostModel for TwoDriverCost {
    fn agents(&self) -> usize {
        2
    }

    fn dim(&self) -> usize {
        1
    }

    fn value(&self, i: usize, x_i: &[f64], p_i: f64) -> f64 {
        let (r, _) = Self::residual(i, x_i[0], p_i);
        r * r
    }

    fn dp(&self, i: usize, x_i: &[f64], p_i: f64) -> f64 {
        let (r, _) = Self::residual(i, x_i[0], p_i);
        2.0 * r
    }

    fn dpp(&self, _i: usize, _x_i: &[f64], _p_i: f64) -> f64 {
        2.0
    }

    fn grad_x(&self, i: usize, x_i: &[f64], p_i: f64) -> DVector<f64> {
        let (r, cx) = Self::residual(i, x_i[0], p_i);
        DVector::from_element(1, 2.0 * cx * r)
    }

    fn hess_x(&self, i: usize, x_i: &[f64], p_i: f64) -> DMatrix<f64> {
        let (_, cx) = Self::residual(i, x_i[0], p_i);
        DMatrix::from_element(1, 1, 2.0 * cx * cx)
    }

    fn p_linear_profile(&self, i: usize, x_i: &[f64]) -> Option<(f64, f64)> {
        let (r, _) = Self::residual(i, x_i[0], 0.0);
        Some((2.0, 2.0 * r))
    }

    fn hess_lipschitz(&self, _i: usize) -> f64 {
        0.0
    }
}

/// Build the two-driver scenario for the given weather.
pub fn make_two_driver_example(weather: Weather) -> ScenarioBundle {
    let dist = match weather {
        Weather::Sunny => DistributionSpec::dirac_iid(2, 1.5),
        Weather::Cloudy => {
            DistributionSpec::new(vec![Marginal::Uniform(0.0, 1.5); 2]).expect("valid range")
        }
    };
    ScenarioBundle {
        instances: vec![Instance {
            model: Arc::new(TwoDriverCost),
            weight: 1.0,
        }],
        dist,
        p_ref: 0.0,
        n: 2,
        d: 1,
        params: ScenarioParams::TwoDriver {
            weather: match weather {
                Weather::Sunny => "sunny".into(),
                Weather::Cloudy => "cloudy".into(),
            },
        },
    }
}
