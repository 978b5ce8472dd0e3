//! The pricing pipeline: simulate the panel, build the clean/credit
//! surfaces, solve the switching system, extract the policy, fit the hedge
//! and assemble the results with Monte Carlo error bars.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use switchcsa_core::claim::{
    clean_dividends, close_out_value, price_from_ledger, CashflowLedger, PriceSurface,
    SurfaceKind,
};
use switchcsa_core::csa::{
    bcva, collateral, contingent_bcva, contingent_collateral, default_loss_leg, CsaSpec,
};
use switchcsa_core::hedging::{
    check_self_financing, error_process, fit_hedge, simulate_gains, simulate_wealth,
    HedgeReport, SelfFinancingCheck,
};
use switchcsa_core::market::{simulate_panel, ScenarioPanel};
use switchcsa_core::rbsde::{
    solve_switching_system, Absorption, GeneratorSpec, Obstacle, RbsdeProblem, RbsdeSolution,
    Regime, SwitchingPolicy,
};
use switchcsa_core::{block_se, csa::funding_rate, market::build_time_grid};

use crate::{EngineError, RunConfig};

const BOOTSTRAP_BLOCKS: usize = 20;

/// Switching activity summary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SwitchStats {
    pub total_switches: usize,
    pub mean_switches_per_path: f64,
    pub max_switches_on_a_path: usize,
    /// Switch counts per grid node.
    pub node_histogram: Vec<usize>,
}

/// Headline pricing output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PricingResult {
    pub initial_regime: String,
    /// Contract value at inception (the initial regime's system value).
    pub total_value: f64,
    pub total_se: f64,
    /// Indicator decomposition of the total: the component of the regime
    /// occupied at inception carries the value, the other is zero, and the
    /// two sum to the total exactly.
    pub component_z: f64,
    pub component_zeta: f64,
    /// System values of the two regimes at inception.
    pub regime_value_z: f64,
    pub regime_value_z_se: f64,
    pub regime_value_zeta: f64,
    pub regime_value_zeta_se: f64,
    /// Counterparty-risk-free value and credit/funding adjustments at 0.
    pub clean_value: f64,
    pub clean_se: f64,
    pub bcva: f64,
    pub bcva_se: f64,
    /// Funding value adjustment of the collateralized regime:
    /// regime-zeta value minus the clean value.
    pub funding_adjustment: f64,
    /// Collateral held at inception under the contingent CSA.
    pub initial_collateral: f64,
    pub switch_stats: SwitchStats,
    pub hedge_error_variance_z: f64,
    pub hedge_error_variance_zeta: f64,
    pub hedge_error_variance_pooled: f64,
    pub self_financing_passed: bool,
    pub self_financing_violations: usize,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
}

impl PricingResult {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result serialize");
        s.push('\n');
        s
    }
}

/// Everything the pipeline produced; kept for report emission and
/// debugging. Partially filled when a stage fails.
#[derive(Default)]
pub struct Artifacts {
    pub panel: Option<ScenarioPanel<f64>>,
    pub clean_ledger: Option<CashflowLedger<f64>>,
    pub clean: Option<PriceSurface<f64>>,
    pub bcva_surface: Option<PriceSurface<f64>>,
    pub standard_collateral: Option<Array2<f64>>,
    pub perfect_collateral: Option<Array2<f64>>,
    pub solution_z: Option<RbsdeSolution<f64>>,
    pub solution_zeta: Option<RbsdeSolution<f64>>,
    pub policy: Option<SwitchingPolicy>,
    pub contingent_collateral: Option<Array2<f64>>,
    pub contingent_bcva: Option<Array2<f64>>,
    pub hedge: Option<HedgeReport<f64>>,
    pub self_financing: Option<SelfFinancingCheck>,
    pub result: Option<PricingResult>,
}

/// Runs the full pipeline. On failure the partially filled [`Artifacts`]
/// are returned alongside the error so completed stages can still be
/// flushed.
pub fn run_pricing(config: &RunConfig) -> (Artifacts, Result<(), EngineError>) {
    let mut artifacts = Artifacts::default();
    let outcome = run_stages(config, &mut artifacts);
    (artifacts, outcome)
}

fn run_stages(config: &RunConfig, artifacts: &mut Artifacts) -> Result<(), EngineError> {
    config.validate()?;
    let params = config.market_params();
    let claim = config.claim_spec()?;
    let csa_terms = config.csa_spec()?;
    let regression = config.regression_spec();
    let options = config.solver_options();
    let initial_regime = config.initial_regime();
    let seed = config.run.seed;

    // 1) Forward simulation.
    let grid = build_time_grid(config.grid.maturity, config.grid.steps)
        .map_err(EngineError::stage("simulate"))?;
    let panel = simulate_panel(&params, &grid, config.run.paths, seed)
        .map_err(EngineError::stage("simulate"))?;
    let steps = grid.steps();
    let nodes = steps + 1;
    let paths = panel.paths();
    artifacts.panel = Some(panel);
    let panel = artifacts.panel.as_ref().unwrap();

    // 2) Clean surface and credit/collateral processes.
    let ledger = clean_dividends(&claim, panel).map_err(EngineError::stage("clean-price"))?;
    let clean = price_from_ledger(&ledger, panel, &regression, false)
        .map_err(EngineError::stage("clean-price"))?;
    artifacts.clean_ledger = Some(ledger);
    artifacts.clean = Some(clean);
    let clean = artifacts.clean.as_ref().unwrap();

    let bcva_surface =
        bcva(clean, panel, &params, &regression).map_err(EngineError::stage("bcva"))?;
    artifacts.bcva_surface = Some(bcva_surface);
    let bcva_surface = artifacts.bcva_surface.as_ref().unwrap();

    artifacts.standard_collateral = Some(collateral(clean, &csa_terms, panel));
    let perfect_terms = CsaSpec {
        threshold_a: 0.0,
        threshold_b: 0.0,
        mta: 0.0,
        ..csa_terms
    };
    artifacts.perfect_collateral = Some(collateral(clean, &perfect_terms, panel));

    // 3) The two-regime system.
    let (problem_z, problem_zeta) = build_regime_problems(config, panel, clean, &params);
    let (sol_z, sol_zeta) = solve_switching_system(
        &problem_z,
        &problem_zeta,
        &csa_terms,
        panel,
        &regression,
        &options,
    )
    .map_err(EngineError::stage("rbsde"))?;
    let policy = match initial_regime {
        Regime::Z => sol_z.policy.clone().expect("system policy"),
        Regime::Zeta => sol_zeta.policy.clone().expect("system policy"),
    };
    policy
        .validate(panel)
        .map_err(EngineError::stage("rbsde"))?;

    // 4) Contingent processes under the optimal policy.
    let indicator = policy.indicator(nodes);
    artifacts.contingent_collateral = Some(contingent_collateral(
        artifacts.perfect_collateral.as_ref().unwrap(),
        &indicator,
    ));
    artifacts.contingent_bcva = Some(contingent_bcva(&bcva_surface.values, &indicator));

    // 5) Hedge: separable scheme, each regime fitted standalone.
    let hedging_spec = config.hedging_spec()?;
    let gains =
        simulate_gains(&hedging_spec, &params, panel).map_err(EngineError::stage("hedge"))?;
    let surface_z = PriceSurface {
        values: sol_z.y.clone(),
        kind: SurfaceKind::RegimeZ,
        se0: sol_z.value0_se,
    };
    let surface_zeta = PriceSurface {
        values: sol_zeta.y.clone(),
        kind: SurfaceKind::RegimeZeta,
        se0: sol_zeta.value0_se,
    };
    let fit_z = fit_hedge(
        Regime::Z,
        &surface_z,
        problem_z.flows.as_ref(),
        &gains,
        &params,
        panel,
        &regression,
        config.hedging.conditional,
    )
    .map_err(EngineError::stage("hedge"))?;
    let fit_zeta = fit_hedge(
        Regime::Zeta,
        &surface_zeta,
        problem_zeta.flows.as_ref(),
        &gains,
        &params,
        panel,
        &regression,
        config.hedging.conditional,
    )
    .map_err(EngineError::stage("hedge"))?;
    let wealth_z = simulate_wealth(
        Regime::Z,
        &surface_z,
        problem_z.flows.as_ref(),
        &fit_z.positions,
        &gains,
        &params,
        panel,
    );
    let wealth_zeta = simulate_wealth(
        Regime::Zeta,
        &surface_zeta,
        problem_zeta.flows.as_ref(),
        &fit_zeta.positions,
        &gains,
        &params,
        panel,
    );
    let error_z = error_process(&surface_z, &wealth_z, panel);
    let error_zeta = error_process(&surface_zeta, &wealth_zeta, panel);
    let hedge = HedgeReport {
        positions_z: fit_z.positions,
        positions_zeta: fit_zeta.positions,
        wealth_z,
        wealth_zeta,
        error_z,
        error_zeta,
    };
    let initial_value = match initial_regime {
        Regime::Z => surface_z.value0(),
        Regime::Zeta => surface_zeta.value0(),
    };
    let self_financing = check_self_financing(&hedge, &policy, &csa_terms, initial_value);

    // 6) Result assembly with path-block error bars.
    let se_z = regime_value0_block_se(&sol_z, problem_z.flows.as_ref(), panel, &params, Regime::Z);
    let se_zeta = regime_value0_block_se(
        &sol_zeta,
        problem_zeta.flows.as_ref(),
        panel,
        &params,
        Regime::Zeta,
    );
    let clean_contributions: Vec<f64> = clean_node0_contributions(
        artifacts.clean_ledger.as_ref().unwrap(),
        panel,
    );
    let clean_se = block_se(&clean_contributions, BOOTSTRAP_BLOCKS);
    let leg0: Vec<f64> = (0..paths)
        .map(|p| default_loss_leg(clean, panel, &params, p, 0))
        .collect();
    let bcva_se = block_se(&leg0, BOOTSTRAP_BLOCKS);

    let total_value = initial_value;
    let total_se = match initial_regime {
        Regime::Z => se_z,
        Regime::Zeta => se_zeta,
    };
    let (component_z, component_zeta) = match initial_regime {
        Regime::Z => (total_value, 0.0),
        Regime::Zeta => (0.0, total_value),
    };
    let initial_collateral = artifacts.contingent_collateral.as_ref().unwrap()[[0, 0]];

    let mut node_histogram = vec![0usize; nodes];
    let mut max_switches = 0usize;
    let mut total_switches = 0usize;
    for sw in &policy.switches {
        max_switches = max_switches.max(sw.len());
        total_switches += sw.len();
        for &(k, _) in sw {
            node_histogram[k] += 1;
        }
    }
    let switch_stats = SwitchStats {
        total_switches,
        mean_switches_per_path: total_switches as f64 / paths as f64,
        max_switches_on_a_path: max_switches,
        node_histogram,
    };

    let result = PricingResult {
        initial_regime: match initial_regime {
            Regime::Z => "z".to_string(),
            Regime::Zeta => "zeta".to_string(),
        },
        total_value,
        total_se,
        component_z,
        component_zeta,
        regime_value_z: sol_z.value0(),
        regime_value_z_se: se_z,
        regime_value_zeta: sol_zeta.value0(),
        regime_value_zeta_se: se_zeta,
        clean_value: clean.value0(),
        clean_se,
        bcva: bcva_surface.value0(),
        bcva_se,
        funding_adjustment: sol_zeta.value0() - clean.value0(),
        initial_collateral,
        switch_stats,
        hedge_error_variance_z: hedge.error_z.terminal_variance,
        hedge_error_variance_zeta: hedge.error_zeta.terminal_variance,
        hedge_error_variance_pooled: hedge.pooled_variance(),
        self_financing_passed: self_financing.passed(),
        self_financing_violations: self_financing.violations.len(),
        paths,
        steps,
        seed,
    };

    artifacts.solution_z = Some(sol_z);
    artifacts.solution_zeta = Some(sol_zeta);
    artifacts.policy = Some(policy);
    artifacts.hedge = Some(hedge);
    artifacts.self_financing = Some(self_financing);
    artifacts.result = Some(result);
    Ok(())
}

/// Builds the per-regime backward problems: coupon flows truncated at the
/// first default, the terminal payoff paid as the last flow (the terminal
/// condition itself is zero), and the recursion absorbed at the default
/// node with the regime's close-out value — the recovery-weighted clean
/// value in the zero-collateral regime, the full clean value under perfect
/// collateral.
fn build_regime_problems(
    config: &RunConfig,
    panel: &ScenarioPanel<f64>,
    clean: &PriceSurface<f64>,
    params: &switchcsa_core::MarketParams64,
) -> (RbsdeProblem<f64>, RbsdeProblem<f64>) {
    let paths = panel.paths();
    let steps = panel.grid().steps();
    let clean_flows = &config
        .claim_spec()
        .expect("validated claim")
        .coupons;
    let grid = panel.grid();
    let claim = config.claim_spec().expect("validated claim");

    // Coupon node map (validated earlier).
    let dt = grid.dt();
    let coupon_nodes: Vec<(usize, f64)> = clean_flows
        .iter()
        .map(|(time, rule)| (((*time / dt).round()) as usize, rule.amount()))
        .collect();

    let mut flows = Array2::zeros((paths, steps + 1));
    let mut absorption_node = vec![None; paths];
    let mut value_z = vec![0.0; paths];
    let mut value_zeta = vec![0.0; paths];
    for p in 0..paths {
        let death = panel.default_node(p);
        let horizon = death.unwrap_or(steps + 1);
        for &(k, amount) in &coupon_nodes {
            if k < horizon {
                flows[[p, k]] += amount;
            }
        }
        match death {
            None => {
                flows[[p, steps]] += claim.terminal.eval(panel.spot()[[p, steps]]);
            }
            Some(k_tau) => {
                let clean_at_default = clean.values[[p, k_tau]];
                let defaulter = panel.defaulter(p).expect("defaulted path");
                absorption_node[p] = Some(k_tau);
                value_z[p] = close_out_value(
                    clean_at_default,
                    defaulter,
                    params.recovery_a,
                    params.recovery_b,
                );
                value_zeta[p] = clean_at_default;
            }
        }
    }

    let noise_dim = panel.driver_count();
    let problem_z = RbsdeProblem::new(vec![0.0; paths], GeneratorSpec::Discount, noise_dim)
        .with_flows(flows.clone())
        .with_obstacle(Obstacle::OtherRegimeMinusCost)
        .with_absorption(Absorption {
            node: absorption_node.clone(),
            value: value_z,
        });
    let problem_zeta = RbsdeProblem::new(
        vec![0.0; paths],
        GeneratorSpec::DiscountWithFunding {
            negative_spread: funding_rate(true, params),
            positive_spread: funding_rate(false, params),
        },
        noise_dim,
    )
    .with_flows(flows)
    .with_obstacle(Obstacle::OtherRegimeMinusCost)
    .with_absorption(Absorption {
        node: absorption_node,
        value: value_zeta,
    });
    (problem_z, problem_zeta)
}

/// Per-path discounted value of all clean flows after inception.
fn clean_node0_contributions(
    ledger: &CashflowLedger<f64>,
    panel: &ScenarioPanel<f64>,
) -> Vec<f64> {
    let steps = panel.grid().steps();
    (0..panel.paths())
        .map(|p| {
            let mut acc = 0.0;
            for k in 1..=steps {
                let a = ledger.amounts[[p, k]];
                if a != 0.0 {
                    acc += a / panel.bank_account()[[p, k]];
                }
            }
            acc
        })
        .collect()
}

/// Path-block standard error of a regime's root value: the node-0 targets
/// are re-aggregated per block and pushed through the same mean-plus-
/// generator step the solver applies at the degenerate root node.
fn regime_value0_block_se(
    solution: &RbsdeSolution<f64>,
    flows: Option<&Array2<f64>>,
    panel: &ScenarioPanel<f64>,
    params: &switchcsa_core::MarketParams64,
    regime: Regime,
) -> f64 {
    let paths = panel.paths();
    let dt = panel.grid().dt();
    let contributions: Vec<f64> = (0..paths)
        .map(|p| {
            let mut t = solution.y[[p, 1]];
            if let Some(f) = flows {
                t += f[[p, 1]];
            }
            t
        })
        .collect();
    let blocks = BOOTSTRAP_BLOCKS.min(paths / 2).max(2);
    let per = paths / blocks;
    if per == 0 {
        return solution.value0_se;
    }
    let r0 = panel.short_rate()[[0, 0]];
    let mut block_values = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let lo = b * per;
        let hi = if b + 1 == blocks { paths } else { lo + per };
        let m = contributions[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        let drift = match regime {
            Regime::Z => r0,
            Regime::Zeta => r0 + funding_rate(m < 0.0, params),
        };
        // One explicit-plus-one-iteration generator step, as at the root.
        let y0 = m - drift * m * dt;
        let y1 = m - drift * y0 * dt;
        block_values.push(y1);
    }
    let mean = block_values.iter().sum::<f64>() / blocks as f64;
    let var = block_values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (blocks - 1) as f64;
    (var / blocks as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_se_shrinks_with_paths() {
        let cfg_text = r#"
[grid]
maturity = 1.0
steps = 6

[market]
initial_spot = 100.0
spot_drift = 0.0
spot_vol = 0.2
intensity_a = 0.0
intensity_b = 0.0
recovery_a = 0.4
recovery_b = 0.4

[market.short_rate]
model = "constant"
rate = 0.0

[claim]
terminal = { kind = "call", strike = 100.0 }

[csa]
cost_to_z = "infinite"
cost_to_zeta = "infinite"

[run]
paths = 2000
seed = 1
"#;
        let small = RunConfig::from_toml(cfg_text).unwrap();
        let mut big = small.clone();
        big.run.paths = 16_000;
        let (a_small, r1) = run_pricing(&small);
        let (a_big, r2) = run_pricing(&big);
        r1.unwrap();
        r2.unwrap();
        let se_small = a_small.result.unwrap().total_se;
        let se_big = a_big.result.unwrap().total_se;
        assert!(se_big < se_small, "se_small={se_small} se_big={se_big}");
        assert!(se_big > 0.0);
    }
}
