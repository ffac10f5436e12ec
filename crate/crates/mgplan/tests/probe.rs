// scratch probe for solver behavior (temporary)
use mgplan::scenario::*;
use mgplan::graph::SolverConfig;

#[test]
#[ignore]
fn probe_head_on() {
    let sc = Scenario {
        agents: vec![
            AgentSpec { start: [-10.0, 0.0], goal: [10.0, 0.0], radius: 1.0 },
            AgentSpec { start: [10.0, 0.0], goal: [-10.0, 0.0], radius: 1.0 },
        ],
        map: None,
        environment: None,
        t_total: 10.0,
        num_intervals: 9,
        n_p: 9,
        eps_obs: 2.0,
        sigma_obs: 0.3,
        eps_mul: 15.0,
        sigma_mul: 0.7,
        qc: 1.0,
        init: InitMode::Line,
    };
    let config = SolverConfig::from_scenario(&sc);
    let r = run_joint(&sc, &config).unwrap();
    println!(
        "head-on: success={} min_inter={:?} goal_err={:?} iters={} time={:.1}ms cost: {:.3} -> {:.3}",
        r.success, r.min_inter_clearance, r.goal_errors, r.iterations, r.solve_time_ms,
        r.cost_trace.first().unwrap(), r.cost_trace.last().unwrap()
    );
    assert!(r.success);
}

#[test]
#[ignore]
fn probe_formations() {
    for n in [3usize, 4, 5] {
        let scs = formation_permutations(n);
        let mut fails = Vec::new();
        let mut total_ms = 0.0;
        let mut max_iters = 0;
        for (i, sc) in scs.iter().enumerate() {
            let config = SolverConfig::from_scenario(sc);
            let r = run_joint(sc, &config).unwrap();
            total_ms += r.solve_time_ms;
            max_iters = max_iters.max(r.iterations);
            if !r.success {
                fails.push((i, r.min_inter_clearance, r.goal_errors.iter().cloned().fold(0.0, f64::max)));
            }
        }
        println!(
            "joint n={n}: {}/{} ok, mean {:.1} ms, max iters {max_iters}, fails: {fails:?}",
            scs.len() - fails.len(),
            scs.len(),
            total_ms / scs.len() as f64
        );
    }
}

#[test]
#[ignore]
fn probe_baseline_small() {
    for n in [3usize, 4, 5] {
        let scs = formation_permutations(n);
        let mut fails = Vec::new();
        let mut total_ms = 0.0;
        for (i, sc) in scs.iter().enumerate() {
            let config = SolverConfig::from_scenario(sc);
            let r = run_sequential_baseline(sc, &config).unwrap();
            total_ms += r.solve_time_ms;
            if !r.success {
                fails.push((
                    i,
                    r.min_inter_clearance.map(|v| (v * 100.0).round() / 100.0),
                    (r.goal_errors.iter().cloned().fold(0.0, f64::max) * 100.0).round() / 100.0,
                ));
            }
        }
        println!(
            "seq n={n}: {}/{} ok ({:.1}%), mean {:.1} ms, fails(id,min_inter,goal): {fails:?}",
            scs.len() - fails.len(),
            scs.len(),
            100.0 * (scs.len() - fails.len()) as f64 / scs.len() as f64,
            total_ms / scs.len() as f64
        );
    }
}

#[test]
#[ignore]
fn probe_hallway_grid() {
    for (eps_mul, sigma_mul) in [
        (4.0, 0.7), (6.0, 0.7), (8.0, 0.7), (10.0, 0.7),
        (6.0, 0.3), (8.0, 0.3), (10.0, 0.3), (12.0, 0.7), (15.0, 0.3),
    ] {
        let mut sc = hallway_scenario();
        sc.eps_mul = eps_mul;
        sc.sigma_mul = sigma_mul;
        let config = SolverConfig::from_scenario(&sc);
        let r = run_joint(&sc, &config).unwrap();
        println!(
            "eps_mul={eps_mul:>4} sigma_mul={sigma_mul:>3}: success={} min_inter={:.2} min_static={:.2} iters={} time={:.0}ms",
            r.success,
            r.min_inter_clearance.unwrap(),
            r.min_static_clearance.unwrap(),
            r.iterations,
            r.solve_time_ms
        );
    }
}

#[test]
#[ignore]
fn probe_hallway() {
    let sc = hallway_scenario();
    let mut config = SolverConfig::from_scenario(&sc);
    config.max_iterations = 1000;
    config.relative_cost_tolerance = 1e-9;
    let r = run_joint(&sc, &config).unwrap();
    println!(
        "hallway: success={} min_inter={:?} min_static={:?} goal_err={:?} iters={} time={:.1}ms",
        r.success, r.min_inter_clearance, r.min_static_clearance, r.goal_errors, r.iterations, r.solve_time_ms
    );
}
