//! Cross-validation of the backward solvers against independent oracles:
//! binomial trees, closed forms and exhaustive lattice enumeration.

use ndarray::Array2;
use switchcsa_core::csa::{CsaSpec, SwitchCost};
use switchcsa_core::market::{
    build_time_grid, simulate_panel, FundingSpreads, MarketParams, ScenarioPanel,
    ShortRateModel,
};
use switchcsa_core::oracle::{
    binomial_american, black_scholes_price, OptionKind, SwitchingLattice,
};
use switchcsa_core::rbsde::{
    snell_value, solve_single_rbsde, solve_switching_system, structure_report, GeneratorSpec,
    Obstacle, RbsdeProblem, Regime, SolverOptions,
};
use switchcsa_core::regression::{BasisFamily, RegressionSpec};
use switchcsa_core::{det_sum, Real};

/// Local spline basis used for the obstacle problems; local bases keep the
/// per-node fit errors from polluting the whole state space.
fn spline_spec() -> RegressionSpec {
    RegressionSpec {
        family: BasisFamily::PiecewiseLinear,
        degree: 7,
        include_rate: false,
        sv_rel_threshold: 1e-12,
    }
}

fn gbm_params(r: f64, vol: f64) -> MarketParams<f64> {
    MarketParams {
        initial_spot: 100.0,
        spot_drift: r,
        spot_vol: vol,
        short_rate: ShortRateModel::Constant(r),
        intensity_a: 0.0,
        intensity_b: 0.0,
        recovery_a: 0.4,
        recovery_b: 0.4,
        funding: FundingSpreads::default(),
        correlation: vec![vec![1.0]],
    }
}

fn put_obstacle(panel: &ScenarioPanel<f64>, strike: f64) -> Array2<f64> {
    let (paths, nodes) = panel.spot().dim();
    Array2::from_shape_fn((paths, nodes), |(p, k)| {
        (strike - panel.spot()[[p, k]]).max(0.0)
    })
}

fn american_put_problem(panel: &ScenarioPanel<f64>, strike: f64) -> RbsdeProblem<f64> {
    let terminal: Vec<f64> = (0..panel.paths())
        .map(|p| (strike - panel.spot()[[p, panel.grid().steps()]]).max(0.0))
        .collect();
    RbsdeProblem::new(terminal, GeneratorSpec::Discount, 1)
        .with_obstacle(Obstacle::Grid(put_obstacle(panel, strike)))
}

#[test]
fn unobstructed_bsde_degenerates_to_conditional_expectation() {
    // Psi = 0, no obstacle: Y_0 is the plain Monte Carlo mean of the payoff.
    let grid = build_time_grid(1.0, 10).unwrap();
    let panel = simulate_panel(&gbm_params(0.0, 0.2), &grid, 5_000, 42).unwrap();
    let terminal: Vec<f64> = (0..panel.paths())
        .map(|p| (panel.spot()[[p, 10]] - 100.0).max(0.0))
        .collect();
    let mc_mean = det_sum(&terminal) / terminal.len() as f64;

    let problem = RbsdeProblem::new(terminal, GeneratorSpec::Zero, 1);
    let sol = solve_single_rbsde(
        &problem,
        &panel,
        &RegressionSpec::monomial(3),
        &SolverOptions::default(),
    )
    .unwrap();
    assert!(
        (sol.value0() - mc_mean).abs() < 1e-9,
        "rbsde={} mc={mc_mean}",
        sol.value0()
    );
}

#[test]
fn constant_problem_saturates_nothing() {
    // xi = L = c everywhere: Y = c, A = 0, N = 0.
    let grid = build_time_grid(1.0, 6).unwrap();
    let panel = simulate_panel(&gbm_params(0.0, 0.2), &grid, 800, 7).unwrap();
    let c = 5.0;
    let problem = RbsdeProblem::new(vec![c; panel.paths()], GeneratorSpec::Zero, 1)
        .with_obstacle(Obstacle::Grid(Array2::from_elem((800, 7), c)));
    let sol = solve_single_rbsde(
        &problem,
        &panel,
        &RegressionSpec::monomial(3),
        &SolverOptions::default(),
    )
    .unwrap();
    for v in sol.y.iter() {
        assert!((v - c).abs() < 1e-9);
    }
    for a in sol.a_increments.iter() {
        assert!(a.abs() < 1e-9);
    }
    for n in sol.n.iter() {
        assert!(n.abs() < 1e-9);
    }
}

#[test]
fn american_put_matches_binomial_tree() {
    // The acceptance-scale configuration: 50 steps, 100k paths against a
    // 2000-step tree.
    let grid = build_time_grid(1.0, 50).unwrap();
    let panel = simulate_panel(&gbm_params(0.05, 0.2), &grid, 100_000, 2024).unwrap();
    let problem = american_put_problem(&panel, 100.0);
    let options = SolverOptions {
        obstacle_basis_powers: 1,
        ..Default::default()
    };
    let spec = spline_spec();
    let sol = solve_single_rbsde(&problem, &panel, &spec, &options).unwrap();

    let tree = binomial_american(OptionKind::Put, 100.0, 100.0, 0.05, 0.2, 1.0, 2000);
    let rel = (sol.value0() - tree).abs() / tree;
    println!(
        "american put: rbsde={:.6} (se {:.6}) tree={tree:.6} rel_err={:.5}",
        sol.value0(),
        sol.value0_se,
        rel
    );
    assert!(rel < 0.01, "relative error {rel} above 1%");

    // Structural conformance on the same solve.
    let obstacle = put_obstacle(&panel, 100.0);
    let scale = sol.diagnostics.value_scale;
    let report = structure_report(&sol, &obstacle, 1e-8 * scale, |_, _| true);
    assert!(report.max_obstacle_violation <= 1e-8 * scale);
    assert!(report.complementarity_residual <= 1e-6 * scale);
    assert!(report.min_a_increment >= -1e-12);
}

#[test]
fn snell_recursion_agrees_with_rbsde_solver() {
    let grid = build_time_grid(1.0, 25).unwrap();
    let panel = simulate_panel(&gbm_params(0.05, 0.2), &grid, 20_000, 5).unwrap();
    let problem = american_put_problem(&panel, 100.0);
    let options = SolverOptions {
        obstacle_basis_powers: 1,
        ..Default::default()
    };
    let spec = spline_spec();
    let sol = solve_single_rbsde(&problem, &panel, &spec, &options).unwrap();
    let snell = snell_value(&problem, &panel, &spec, &options, None).unwrap();
    let tol = 2.0 * sol.value0_se.max(snell.value0_se);
    assert!(
        (sol.value0() - snell.value0()).abs() <= tol,
        "rbsde={} snell={} tol={tol}",
        sol.value0(),
        snell.value0()
    );
}

#[test]
fn snell_without_obstacle_equals_continuation() {
    let grid = build_time_grid(1.0, 8).unwrap();
    let panel = simulate_panel(&gbm_params(0.0, 0.2), &grid, 3_000, 11).unwrap();
    let terminal: Vec<f64> = (0..panel.paths())
        .map(|p| (panel.spot()[[p, 8]] - 100.0).max(0.0))
        .collect();
    let problem = RbsdeProblem::new(terminal, GeneratorSpec::Zero, 1);
    let sol = solve_single_rbsde(
        &problem,
        &panel,
        &RegressionSpec::monomial(3),
        &SolverOptions::default(),
    )
    .unwrap();
    let snell = snell_value(
        &problem,
        &panel,
        &RegressionSpec::monomial(3),
        &SolverOptions::default(),
        None,
    )
    .unwrap();
    // Same regressions, no reflection anywhere: identical values.
    for (a, b) in sol.y.iter().zip(snell.values.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn immediate_stop_when_obstacle_dominates() {
    // Constant obstacle far above any continuation: value = L at the root.
    let grid = build_time_grid(1.0, 6).unwrap();
    let panel = simulate_panel(&gbm_params(0.0, 0.2), &grid, 500, 3).unwrap();
    let l = 500.0;
    let mut obstacle = Array2::from_elem((500, 7), l);
    // Terminal condition must dominate the terminal obstacle.
    for p in 0..500 {
        obstacle[[p, 6]] = 0.0;
    }
    let problem = RbsdeProblem::new(vec![0.0; 500], GeneratorSpec::Zero, 1)
        .with_obstacle(Obstacle::Grid(obstacle));
    let snell = snell_value(
        &problem,
        &panel,
        &RegressionSpec::monomial(2),
        &SolverOptions::default(),
        None,
    )
    .unwrap();
    assert!((snell.value0() - l).abs() < 1e-9);
}

#[test]
fn terminal_obstacle_violation_is_rejected() {
    let grid = build_time_grid(1.0, 4).unwrap();
    let panel = simulate_panel(&gbm_params(0.0, 0.2), &grid, 50, 9).unwrap();
    let problem = RbsdeProblem::new(vec![0.0; 50], GeneratorSpec::Zero, 1)
        .with_obstacle(Obstacle::Grid(Array2::from_elem((50, 5), 1.0)));
    assert!(solve_single_rbsde(
        &problem,
        &panel,
        &RegressionSpec::monomial(2),
        &SolverOptions::default()
    )
    .is_err());
}

fn lattice_toy() -> SwitchingLattice {
    SwitchingLattice {
        s0: 100.0,
        up: 1.3,
        down: 0.8,
        steps: 3,
        flow_z_level: 0.0,
        flow_z_slope: 1.0,
        flow_zeta_level: 0.05,
        cost_into_z: 0.1,
        cost_into_zeta: 0.1,
    }
}

fn lattice_problems(
    toy: &SwitchingLattice,
) -> (ScenarioPanel<f64>, RbsdeProblem<f64>, RbsdeProblem<f64>) {
    let panel = toy.panel().unwrap();
    let (flows_z, flows_zeta) = toy.flow_matrices();
    let zeros = vec![0.0; panel.paths()];
    let problem_z = RbsdeProblem::new(zeros.clone(), GeneratorSpec::Zero, 0)
        .with_flows(flows_z)
        .with_obstacle(Obstacle::OtherRegimeMinusCost);
    let problem_zeta = RbsdeProblem::new(zeros, GeneratorSpec::Zero, 0)
        .with_flows(flows_zeta)
        .with_obstacle(Obstacle::OtherRegimeMinusCost);
    (panel, problem_z, problem_zeta)
}

#[test]
fn switching_system_matches_exhaustive_lattice_enumeration() {
    let toy = lattice_toy();
    let (panel, problem_z, problem_zeta) = lattice_problems(&toy);
    let csa = CsaSpec::perfect(
        SwitchCost::Finite(toy.cost_into_z),
        SwitchCost::Finite(toy.cost_into_zeta),
    );
    let spec = RegressionSpec::monomial(3);
    let options = SolverOptions::default();
    let (sol_z, sol_zeta) =
        solve_switching_system(&problem_z, &problem_zeta, &csa, &panel, &spec, &options)
            .unwrap();

    for (initial, sol) in [(Regime::Z, &sol_z), (Regime::Zeta, &sol_zeta)] {
        let oracle = toy.enumerate(initial);
        assert_eq!(oracle.tie_count, 1, "toy must have a unique optimum");
        assert!(oracle.optimality_gap > 1e-6);
        assert!(
            (sol.value0() - oracle.value).abs() < 1e-10,
            "initial {initial:?}: solver={} oracle={}",
            sol.value0(),
            oracle.value
        );
        let policy = sol.policy.as_ref().unwrap();
        policy.validate(&panel).unwrap();
        assert_eq!(
            policy.switches, oracle.switches,
            "switch events differ for initial regime {initial:?}"
        );
    }
    // The toy is interesting only if somebody actually switches.
    let oracle = toy.enumerate(Regime::Zeta);
    assert!(oracle.switches.iter().any(|s| !s.is_empty()));
}

#[test]
fn infinite_costs_reproduce_standalone_solutions_bitwise() {
    let toy = lattice_toy();
    let (panel, problem_z, problem_zeta) = lattice_problems(&toy);
    let csa = CsaSpec::perfect(SwitchCost::Infinite, SwitchCost::Infinite);
    let spec = RegressionSpec::monomial(3);
    let options = SolverOptions::default();
    let (sol_z, sol_zeta) =
        solve_switching_system(&problem_z, &problem_zeta, &csa, &panel, &spec, &options)
            .unwrap();

    let single_z = solve_single_rbsde(
        &RbsdeProblem {
            obstacle: Obstacle::None,
            ..problem_z.clone()
        },
        &panel,
        &spec,
        &options,
    )
    .unwrap();
    let single_zeta = solve_single_rbsde(
        &RbsdeProblem {
            obstacle: Obstacle::None,
            ..problem_zeta.clone()
        },
        &panel,
        &spec,
        &options,
    )
    .unwrap();

    assert_eq!(sol_z.y, single_z.y);
    assert_eq!(sol_zeta.y, single_zeta.y);
    assert!(sol_z.a_increments.iter().all(|&a| a == 0.0));
    assert_eq!(sol_z.policy.as_ref().unwrap().total_switches(), 0);
    assert_eq!(sol_zeta.policy.as_ref().unwrap().total_switches(), 0);
}

#[test]
fn identical_generators_never_switch() {
    // Same flows and generators in both regimes: values coincide bitwise
    // and ties break toward staying.
    let grid = build_time_grid(1.0, 10).unwrap();
    let panel = simulate_panel(&gbm_params(0.03, 0.2), &grid, 4_000, 77).unwrap();
    let mut flows = Array2::zeros((panel.paths(), 11));
    for p in 0..panel.paths() {
        for k in 1..=10 {
            flows[[p, k]] = 0.02 * (panel.spot()[[p, k]] / 100.0 - 1.0);
        }
    }
    let mk = || {
        RbsdeProblem::new(vec![0.0; panel.paths()], GeneratorSpec::Discount, 1)
            .with_flows(flows.clone())
            .with_obstacle(Obstacle::OtherRegimeMinusCost)
    };
    let csa = CsaSpec::perfect(SwitchCost::Finite(0.05), SwitchCost::Finite(0.05));
    let (sol_z, sol_zeta) = solve_switching_system(
        &mk(),
        &mk(),
        &csa,
        &panel,
        &RegressionSpec::monomial(3),
        &SolverOptions::default(),
    )
    .unwrap();
    assert_eq!(sol_z.y, sol_zeta.y);
    assert_eq!(sol_z.policy.as_ref().unwrap().total_switches(), 0);
    assert_eq!(sol_zeta.policy.as_ref().unwrap().total_switches(), 0);
}

#[test]
fn zero_round_trip_cost_is_rejected() {
    let toy = lattice_toy();
    let (panel, problem_z, problem_zeta) = lattice_problems(&toy);
    let csa = CsaSpec::perfect(SwitchCost::Finite(0.0), SwitchCost::Finite(0.0));
    assert!(solve_switching_system(
        &problem_z,
        &problem_zeta,
        &csa,
        &panel,
        &RegressionSpec::monomial(3),
        &SolverOptions::default()
    )
    .is_err());
}

#[test]
fn raising_the_obstacle_never_lowers_the_value() {
    let grid = build_time_grid(1.0, 20).unwrap();
    let panel = simulate_panel(&gbm_params(0.05, 0.2), &grid, 20_000, 31).unwrap();
    let strike = 100.0;
    let problem_low = american_put_problem(&panel, strike);

    // Raised obstacle: a higher strike before maturity, the same terminal
    // condition (so the domination precondition still holds).
    let mut raised = put_obstacle(&panel, 103.0);
    for p in 0..panel.paths() {
        raised[[p, 20]] = (strike - panel.spot()[[p, 20]]).max(0.0);
    }
    let problem_high = RbsdeProblem {
        obstacle: Obstacle::Grid(raised),
        ..problem_low.clone()
    };

    let spec = spline_spec();
    let options = SolverOptions {
        obstacle_basis_powers: 1,
        ..Default::default()
    };
    let low = solve_single_rbsde(&problem_low, &panel, &spec, &options).unwrap();
    let high = solve_single_rbsde(&problem_high, &panel, &spec, &options).unwrap();
    assert!(
        high.value0() >= low.value0() - 1e-9,
        "low={} high={}",
        low.value0(),
        high.value0()
    );
}

#[test]
fn cost_ladder_monotonicity_with_common_random_numbers() {
    let grid = build_time_grid(1.0, 12).unwrap();
    let panel = simulate_panel(&gbm_params(0.0, 0.25), &grid, 4_000, 99).unwrap();
    let mut flows_z = Array2::zeros((panel.paths(), 13));
    let mut flows_zeta = Array2::zeros((panel.paths(), 13));
    for p in 0..panel.paths() {
        for k in 1..=12 {
            flows_z[[p, k]] = 0.4 * (panel.spot()[[p, k]] / 100.0 - 1.0);
            flows_zeta[[p, k]] = 0.02;
        }
    }
    let spec = RegressionSpec::monomial(3);
    let options = SolverOptions::default();
    let mk = |flows: &Array2<f64>, obstacle| {
        RbsdeProblem::new(vec![0.0; panel.paths()], GeneratorSpec::Zero, 1)
            .with_flows(flows.clone())
            .with_obstacle(obstacle)
    };

    // Standalone (no switching) values.
    let alone_z = solve_single_rbsde(&mk(&flows_z, Obstacle::None), &panel, &spec, &options)
        .unwrap()
        .value0();
    let alone_zeta =
        solve_single_rbsde(&mk(&flows_zeta, Obstacle::None), &panel, &spec, &options)
            .unwrap()
            .value0();
    let floor = alone_z.min(alone_zeta);

    let ladder = [0.01, 0.03, 0.08, 0.2, 0.5];
    let mut last_excess = f64::INFINITY;
    let mut last_switches = usize::MAX;
    for cost in ladder {
        let csa = CsaSpec::perfect(SwitchCost::Finite(cost), SwitchCost::Finite(cost));
        let (sol_z, sol_zeta) = solve_switching_system(
            &mk(&flows_z, Obstacle::OtherRegimeMinusCost),
            &mk(&flows_zeta, Obstacle::OtherRegimeMinusCost),
            &csa,
            &panel,
            &spec,
            &options,
        )
        .unwrap();
        let excess = sol_z.value0().max(sol_zeta.value0()) - floor;
        let switches = sol_z.policy.as_ref().unwrap().total_switches()
            + sol_zeta.policy.as_ref().unwrap().total_switches();
        println!("cost={cost}: excess={excess:.6} switches={switches}");
        assert!(
            excess <= last_excess + 1e-9,
            "excess value increased along the cost ladder"
        );
        assert!(
            switches <= last_switches,
            "switch count increased along the cost ladder"
        );
        last_excess = excess;
        last_switches = switches;
    }
}

#[test]
fn generator_lipschitz_sampling() {
    let grid = build_time_grid(1.0, 6).unwrap();
    let panel = simulate_panel(&gbm_params(0.05, 0.2), &grid, 100, 1).unwrap();
    let gen: GeneratorSpec<f64> = GeneratorSpec::Discount;
    let bound = gen.lipschitz_bound(&panel).unwrap();
    assert!((bound - 0.05).abs() < 1e-15);
    gen.check_lipschitz(&panel, bound, 500, 7).unwrap();

    let funding = GeneratorSpec::DiscountWithFunding {
        negative_spread: 0.015,
        positive_spread: -0.008,
    };
    let k = funding.lipschitz_bound(&panel).unwrap();
    funding.check_lipschitz(&panel, k, 500, 8).unwrap();
    // A deliberately understated constant must fail.
    assert!(funding.check_lipschitz(&panel, 0.001, 500, 9).is_err());
}

#[test]
fn solver_works_in_single_precision() {
    let params = MarketParams::<f32> {
        initial_spot: 100.0,
        spot_drift: 0.0,
        spot_vol: 0.2,
        short_rate: ShortRateModel::Constant(0.0),
        intensity_a: 0.0,
        intensity_b: 0.0,
        recovery_a: 0.4,
        recovery_b: 0.4,
        funding: FundingSpreads::default(),
        correlation: vec![vec![1.0]],
    };
    let grid = build_time_grid(1.0f32, 6).unwrap();
    let panel = simulate_panel(&params, &grid, 500, 13).unwrap();
    let terminal: Vec<f32> = (0..panel.paths())
        .map(|p| (100.0 - panel.spot()[[p, 6]]).max(0.0))
        .collect();
    let obstacle = Array2::from_shape_fn((500, 7), |(p, k)| {
        (100.0f32 - panel.spot()[[p, k]]).max(0.0)
    });
    let problem = RbsdeProblem::new(terminal, GeneratorSpec::Zero, 1)
        .with_obstacle(Obstacle::Grid(obstacle));
    let sol = solve_single_rbsde(
        &problem,
        &panel,
        &RegressionSpec::monomial(2),
        &SolverOptions::default(),
    )
    .unwrap();
    assert!(sol.value0().is_finite());
    assert!(sol.value0() > 0.0);
    // Rough sanity against the European closed form.
    let eu = black_scholes_price(OptionKind::Put, 100.0, 100.0, 0.0, 0.2, 1.0) as f32;
    assert!(sol.value0() >= eu - 0.5);
}
