//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `--nocapture` to see them).

mod common;

use common::{assert_vec_close, fd_gradient, unit_f64};
use discrn::graph::random_connected_graph;
use discrn::harness::{empirical_f, run_experiment, ExperimentConfig, Method};
use discrn::inner::{
    contraction_rate, feasible_init, inner_step_size, kkt_oracle, laplacian_flow_step, solve_inner,
    InnerInstance, InnerOptions, StepSizeMode,
};
use discrn::outer::{
    assemble_batch, batch_objective, empirical_derivatives, run_outer, submodel_eval, Batch,
    SubmodelKind, SubmodelParams,
};
use discrn::problem::{
    make_ev_tou_scenario, make_nonconvex_scenario, make_two_driver_example, sample_chi,
    ScenarioBundle, Weather,
};
use discrn::rng;
use nalgebra::DVector;
use std::time::Instant;

fn pass(criterion: usize, detail: &str) {
    println!("acceptance criterion {criterion}: PASS ({detail})");
}

struct RandomInstance {
    scenario: ScenarioBundle,
    graph: discrn::graph::Graph,
    x: DVector<f64>,
    chi: DVector<f64>,
}

/// Quadratic-in-the-allocation instance: nonconvex-scenario costs at a
/// fixed x on a random connected graph.
fn random_instance(j: u64, n: usize) -> RandomInstance {
    let scenario = make_nonconvex_scenario(n, 9000 + j);
    let max_extra = n * (n - 1) / 2 - (n - 1);
    let extra = (unit_f64(j, 0) * (max_extra + 1) as f64) as usize;
    let graph = random_connected_graph(n, n - 1 + extra.min(max_extra), j).unwrap();
    let x = DVector::from_element(n, -1.0 + 2.0 * unit_f64(j, 1));
    let chi = sample_chi(&scenario.dist, &mut rng::stream(j, &[4242]));
    RandomInstance {
        scenario,
        graph,
        x,
        chi,
    }
}

impl RandomInstance {
    fn inner(&self) -> InnerInstance<'_> {
        InnerInstance {
            model: self.scenario.instances[0].model.as_ref(),
            graph: &self.graph,
            x: &self.x,
            chi_hat: &self.chi,
            p_ref: self.scenario.p_ref,
        }
    }
}

#[test]
fn criterion_01_inner_accuracy_vs_oracle() {
    let started = Instant::now();
    let delta = 0.1;
    let mut hits = 0usize;
    let mut worst = 0.0_f64;
    for j in 0..100u64 {
        let t = random_instance(j, 10);
        let inst = t.inner();
        let res = solve_inner(&inst, delta, &InnerOptions::default()).unwrap();
        let p_star = kkt_oracle(inst.model, &t.x, &t.chi, inst.p_ref).unwrap();
        let err = (&res.p_tilde - &p_star).norm();
        worst = worst.max(err);
        if err <= delta {
            hits += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert_eq!(hits, 100, "only {hits}/100 solves within delta");
    assert!(elapsed < 10.0, "runtime {elapsed:.2}s exceeds 10s");
    pass(
        1,
        &format!("100/100 within delta, worst error {worst:.3e}, {elapsed:.2}s"),
    );
}

#[test]
fn criterion_02_exponential_rate_and_iteration_bound() {
    let mut max_ratio_excess = f64::NEG_INFINITY;
    for j in 0..20u64 {
        let t = random_instance(100 + j, 10);
        let inst = t.inner();
        let (omega, theta) = inst.curvature_range();
        let (l2, ln) = (t.graph.lambda2(), t.graph.lambda_n());
        let eta = inner_step_size(omega, theta, l2, ln, StepSizeMode::Exponential).unwrap();
        let rate = contraction_rate(omega, theta, l2, ln);
        assert!(rate < 1.0, "contraction factor must be < 1");
        let delta = 0.1;
        let p_star = kkt_oracle(inst.model, &t.x, &t.chi, inst.p_ref).unwrap();

        let p0 = feasible_init(&t.chi, inst.p_ref, 0);
        let dist0 = (&p0 - &p_star).norm();
        let bound = if dist0 <= delta {
            0
        } else {
            ((delta / dist0).ln() / rate.ln()).ceil() as usize
        };

        let mut p = p0;
        let mut iters_to_delta = 0usize;
        for k in 1..=20_000_000usize {
            let next = laplacian_flow_step(&inst, &p, eta).unwrap();
            let dist = (&p - &p_star).norm();
            let dist_next = (&next - &p_star).norm();
            if dist > 1e-13 {
                let excess = dist_next / dist - (rate + 1e-9);
                max_ratio_excess = max_ratio_excess.max(excess);
                assert!(
                    excess <= 0.0,
                    "solve {j}: step contraction {} above bound {rate}",
                    dist_next / dist
                );
            }
            p = next;
            if dist_next <= delta {
                iters_to_delta = k;
                break;
            }
        }
        assert!(iters_to_delta > 0, "solve {j} never reached delta accuracy");
        assert!(
            iters_to_delta <= bound.max(1),
            "solve {j}: {iters_to_delta} iterations > predicted bound {bound}"
        );
    }
    pass(
        2,
        &format!("20/20 solves within the rate bound (max ratio excess {max_ratio_excess:.1e}) and iteration bound"),
    );
}

#[test]
fn criterion_03_feasibility_conservation() {
    let mut max_drift = 0.0_f64;
    let mut solves = 0usize;
    // nonconvex random instances
    for j in 0..40u64 {
        let t = random_instance(200 + j, 12);
        let res = solve_inner(&t.inner(), 0.1, &InnerOptions::default()).unwrap();
        max_drift = max_drift.max(res.max_budget_drift);
        solves += 1;
    }
    // EV horizon instances
    let ev = make_ev_tou_scenario(8, 20, 3);
    let graph = random_connected_graph(8, 14, 5).unwrap();
    let x = DVector::from_element(8, 0.25);
    for j in 0..20u64 {
        let chi = sample_chi(&ev.dist, &mut rng::stream(j, &[555]));
        let inst = InnerInstance {
            model: ev.instances[(j as usize) % ev.instances.len()]
                .model
                .as_ref(),
            graph: &graph,
            x: &x,
            chi_hat: &chi,
            p_ref: ev.p_ref,
        };
        let res = solve_inner(&inst, 0.1, &InnerOptions::default()).unwrap();
        max_drift = max_drift.max(res.max_budget_drift);
        solves += 1;
    }
    // two-driver
    let td = make_two_driver_example(Weather::Cloudy);
    let k2 = discrn::graph::build_graph(2, &[(1, 2)]).unwrap();
    let x2 = DVector::zeros(2);
    for j in 0..20u64 {
        let chi = sample_chi(&td.dist, &mut rng::stream(j, &[556]));
        let inst = InnerInstance {
            model: td.instances[0].model.as_ref(),
            graph: &k2,
            x: &x2,
            chi_hat: &chi,
            p_ref: td.p_ref,
        };
        let res = solve_inner(&inst, 0.1, &InnerOptions::default()).unwrap();
        max_drift = max_drift.max(res.max_budget_drift);
        solves += 1;
    }
    assert!(
        max_drift <= 1e-9,
        "budget drift {max_drift:.3e} over {solves} solves exceeds 1e-9"
    );
    pass(
        3,
        &format!("max |1'p - budget| = {max_drift:.3e} over {solves} solves"),
    );
}

#[test]
fn criterion_04_two_driver_example() {
    let scenario = make_two_driver_example(Weather::Sunny);
    let graph = discrn::graph::build_graph(2, &[(1, 2)]).unwrap();
    let x = DVector::zeros(2);
    let chi = DVector::from_column_slice(&[1.5, 1.5]);
    let inst = InnerInstance {
        model: scenario.instances[0].model.as_ref(),
        graph: &graph,
        x: &x,
        chi_hat: &chi,
        p_ref: 0.0,
    };
    let res = solve_inner(&inst, 0.1, &InnerOptions::default()).unwrap();
    let err = (&res.p_tilde - DVector::from_column_slice(&[1.0, 2.0])).norm();
    assert!(err <= 0.1, "||p~ - (1,2)|| = {err}");

    let f_hat = empirical_f(&x, 100, &scenario, 0).unwrap();
    assert!(
        f_hat.abs() <= 1e-12,
        "F at the optimum should vanish, got {f_hat}"
    );
    pass(4, &format!("||p~ - (1,2)|| = {err:.3e}, F = {f_hat:.3e}"));
}

#[test]
fn criterion_05_derivative_oracles() {
    let cases: Vec<(&str, ScenarioBundle, usize)> = vec![
        ("two_driver", make_two_driver_example(Weather::Cloudy), 2),
        ("nonconvex", make_nonconvex_scenario(8, 77), 8),
        ("ev_tou", make_ev_tou_scenario(5, 12, 78), 5),
    ];
    let mut checked = 0usize;
    for (name, scenario, n) in cases {
        let m = if n == 2 { 1 } else { 2 * n - 3 };
        let graph = random_connected_graph(n, m, 6).unwrap();
        let x_k = DVector::from_element(n, 0.3);
        let batch = assemble_batch(
            &scenario,
            &graph,
            &x_k,
            4,
            0.1,
            13,
            0,
            &InnerOptions::default(),
            false,
            None,
        )
        .unwrap();
        let f_sk = batch_objective(&batch, &x_k, &scenario);
        let (g_k, h_k) = empirical_derivatives(&batch, &x_k, &scenario);
        let frozen = |x: &DVector<f64>| batch_objective(&batch, x, &scenario);

        for t in 0..100u64 {
            let x = DVector::from_iterator(
                n,
                (0..n).map(|i| unit_f64(31_000 + t, i as u64) * 4.0 - 2.0),
            );

            // batch gradient vs finite differences of the frozen objective
            let (g, h) = empirical_derivatives(&batch, &x, &scenario);
            let g_fd = fd_gradient(frozen, &x, 1e-6);
            assert_vec_close(&g, &g_fd, 1e-5, &format!("{name} batch gradient"));

            // Hessian diagonal vs finite differences of the analytic gradient
            let row = (t as usize) % n;
            let h_fd = fd_gradient(
                |y| empirical_derivatives(&batch, y, &scenario).0[row],
                &x,
                1e-5,
            );
            for col in 0..n {
                let analytic = if row == col { h[row][(0, 0)] } else { 0.0 };
                let scale = 1.0_f64.max(analytic.abs()).max(h_fd[col].abs());
                assert!(
                    (analytic - h_fd[col]).abs() <= 1e-5 * scale,
                    "{name} hessian[{row},{col}]: {analytic} vs {}",
                    h_fd[col]
                );
            }

            // all three submodel gradients vs finite differences of the value
            for kind in [
                SubmodelKind::Cubic,
                SubmodelKind::Gradient,
                SubmodelKind::Newton,
            ] {
                let params = SubmodelParams::uniform(kind, n, 50.0, 100.0, 50.0, 1e-6, 1e-2);
                let (_, grad) = submodel_eval(&params, &x, &x_k, &g_k, &h_k, f_sk);
                let grad_fd = fd_gradient(
                    |y| submodel_eval(&params, y, &x_k, &g_k, &h_k, f_sk).0,
                    &x,
                    1e-6,
                );
                assert_vec_close(&grad, &grad_fd, 1e-5, &format!("{name} {kind:?} gradient"));
            }
            checked += 1;
        }
    }
    pass(
        5,
        &format!("{checked} points across 3 scenarios, rel tol 1e-5"),
    );
}

#[test]
fn criterion_06_overestimation_on_quadratic_costs() {
    let scenario = make_ev_tou_scenario(6, 20, 4);
    let graph = random_connected_graph(6, 10, 5).unwrap();
    let x_k = DVector::from_element(6, 0.1);
    let batch: Batch = assemble_batch(
        &scenario,
        &graph,
        &x_k,
        5,
        0.1,
        31,
        0,
        &InnerOptions::default(),
        false,
        None,
    )
    .unwrap();
    let (g, h) = empirical_derivatives(&batch, &x_k, &scenario);
    let f_sk = batch_objective(&batch, &x_k, &scenario);

    let mut violations = 0usize;
    let mut min_gap = f64::INFINITY;
    for rho in [0.1, 1.0, 50.0] {
        let params = SubmodelParams::uniform(SubmodelKind::Cubic, 6, rho, 1.0, 1.0, 1e-6, 1e-2);
        for t in 0..100u64 {
            let x = DVector::from_iterator(
                6,
                (0..6).map(|i| unit_f64(60_000 + t, i as u64) * 6.0 - 3.0),
            );
            let (m_val, _) = submodel_eval(&params, &x, &x_k, &g, &h, f_sk);
            let frozen = batch_objective(&batch, &x, &scenario);
            min_gap = min_gap.min(m_val - frozen);
            if m_val < frozen {
                violations += 1;
            }
        }
    }
    assert_eq!(violations, 0, "{violations} overestimation violations");
    pass(
        6,
        &format!("0 violations over 300 points, min gap {min_gap:.3e}"),
    );
}

fn nonconvex_reference_config(seed: u64) -> ExperimentConfig {
    let text = format!(
        r#"
        [experiment]
        master_seed = {seed}
        k_outer = 100
        eval_samples = 500
        methods = ["discrn", "gradient", "newton"]
        record_wall_ms = false

        [scenario]
        kind = "nonconvex"
        n = 40
        seed = {seed}

        [graph]
        edges = 120
        seed = {seed}

        [solver]
        delta = 0.1
        batch_size = 20
        rho = 50.0
        eta_g = 100.0
        eta_h = 50.0
    "#
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

#[test]
fn criterion_07_nonconvex_method_comparison() {
    let started = Instant::now();
    let mut ordering_hits = 0usize;
    let mut disagreement_hits = 0usize;
    let mut ratio_report = Vec::new();

    for seed in 1..=10u64 {
        let cfg = nonconvex_reference_config(seed);
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_experiment(&cfg, dir.path(), false).unwrap();
        let find = |name: &str| {
            outcome
                .summary
                .methods
                .iter()
                .find(|m| m.method == name)
                .expect("method summary")
        };
        let (d, g, n) = (find("discrn"), find("gradient"), find("newton"));
        if d.iters_to_plateau < n.iters_to_plateau && n.iters_to_plateau < g.iters_to_plateau {
            ordering_hits += 1;
        }
        if d.final_disagreement <= g.final_disagreement
            && d.final_disagreement <= n.final_disagreement
        {
            disagreement_hits += 1;
        }
        ratio_report.push(format!(
            "seed {seed}: plateau discrn/newton/gradient = {}/{}/{}",
            d.iters_to_plateau, n.iters_to_plateau, g.iters_to_plateau
        ));
    }
    let elapsed = started.elapsed().as_secs_f64();
    for line in &ratio_report {
        println!("  {line}");
    }
    assert!(
        ordering_hits >= 7,
        "plateau ordering held in only {ordering_hits}/10 seeds"
    );
    assert!(
        disagreement_hits >= 7,
        "disagreement ordering held in only {disagreement_hits}/10 seeds"
    );
    assert!(elapsed <= 600.0, "runtime {elapsed:.0}s exceeds 10min");
    pass(
        7,
        &format!(
            "plateau order {ordering_hits}/10, disagreement order {disagreement_hits}/10, {elapsed:.0}s"
        ),
    );
}

#[test]
fn criterion_08_ev_scenario_descent() {
    let started = Instant::now();
    let mut steps = 0usize;
    let mut non_increasing = 0usize;
    for seed in 1..=5u64 {
        let text = format!(
            r#"
            [experiment]
            master_seed = {seed}
            k_outer = 40
            eval_samples = 500
            methods = ["discrn"]
            record_wall_ms = false

            [scenario]
            kind = "ev_tou"
            n = 25
            horizon = 60
            seed = {seed}

            [graph]
            edges = 75
            seed = {seed}

            [solver]
            delta = 0.1
            batch_size = 20
            rho = 0.1
            eta_g = 500.0
            eta_h = 1000.0
            stop_step_norm = 0.3
        "#
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_experiment(&cfg, dir.path(), false).unwrap();
        let f_hat = &outcome.trajectories[0].2;
        assert!(f_hat.len() >= 3, "seed {seed}: trajectory too short");
        for w in f_hat[1..].windows(2) {
            steps += 1;
            if w[1] <= w[0] {
                non_increasing += 1;
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let fraction = non_increasing as f64 / steps as f64;
    assert!(
        fraction >= 0.95,
        "only {non_increasing}/{steps} steps non-increasing"
    );
    assert!(elapsed <= 600.0, "runtime {elapsed:.0}s exceeds 10min");
    pass(
        8,
        &format!(
            "{non_increasing}/{steps} post-first-iteration steps non-increasing, {elapsed:.0}s"
        ),
    );
}

#[test]
fn criterion_09_deterministic_convex_descent() {
    let text = r#"
        [experiment]
        master_seed = 1
        k_outer = 80
        methods = ["discrn"]

        [scenario]
        kind = "two_driver"
        weather = "sunny"

        [solver]
        batch_size = 1
        delta = 1e-9
        rho = 1.0
        subsolver_tol = 1e-16
        subsolver_max_iters = 1000000
        subsolver_r_min = 0.0
        subsolver_r_max = 0.0
        stop_step_norm = 1e-8
        x0 = 1.0
    "#;
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    let scenario = cfg.build_scenario();
    let graph = cfg.build_graph().unwrap();
    let traj = run_outer(&scenario, &graph, &cfg.outer_config(Method::Discrn, None)).unwrap();
    let last_step = traj.records.last().unwrap().step_norm;
    assert!(
        last_step < 1e-8,
        "run ended without reaching the 1e-8 step floor (last step {last_step:.3e})"
    );

    let f: Vec<f64> = traj
        .xs
        .iter()
        .map(|x| empirical_f(x, 1, &scenario, 0).unwrap())
        .collect();
    let mut checked = 0usize;
    for (k, r) in traj.records.iter().enumerate() {
        if r.step_norm >= 1e-8 {
            assert!(
                f[k + 1] < f[k],
                "objective did not strictly decrease at k={k}: {} -> {}",
                f[k],
                f[k + 1]
            );
            checked += 1;
        }
    }
    pass(
        9,
        &format!("strict descent at {checked} iterations down to step norm {last_step:.1e}"),
    );
}

#[test]
fn criterion_10_end_to_end_determinism() {
    let text = r#"
        [experiment]
        master_seed = 12
        k_outer = 4
        eval_samples = 40
        methods = ["discrn", "gradient"]
        record_wall_ms = false

        [scenario]
        kind = "ev_tou"
        n = 4
        horizon = 10
        seed = 2

        [graph]
        edges = 5
        seed = 3

        [solver]
        batch_size = 6
        delta = 0.1
    "#;
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    let run_with = |threads: usize| {
        let dir = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| run_experiment(&cfg, dir.path(), false).unwrap());
        let discrn = std::fs::read(dir.path().join("discrn.csv")).unwrap();
        let gradient = std::fs::read(dir.path().join("gradient.csv")).unwrap();
        (discrn, gradient)
    };

    let serial_a = run_with(1);
    let serial_b = run_with(1);
    let parallel = run_with(4);
    assert_eq!(serial_a, serial_b, "two sequential runs differ");
    assert_eq!(serial_a, parallel, "parallel run differs from sequential");
    pass(10, "byte-identical CSVs across reruns and thread counts");
}
