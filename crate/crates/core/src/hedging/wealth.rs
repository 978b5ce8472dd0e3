//! Forward wealth accumulation, the hedging-error process and the
//! self-financing verification.

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::claim::PriceSurface;
use crate::csa::{funding_rate, CsaSpec};
use crate::error::Result;
use crate::market::{MarketParams, ScenarioPanel};
use crate::rbsde::{Regime, SwitchingPolicy};
use crate::scalar::Real;
use crate::util::sample_variance;

use super::HedgingAssets;

/// One Euler step of a regime's wealth dynamic: financing drift (plus the
/// funding wedge in the full-collateral regime), hedge gains, contract
/// dividends paid out and any switching cost charged at this node.
#[allow(clippy::too_many_arguments)]
pub fn wealth_step<T: Real>(
    regime: Regime,
    wealth: T,
    short_rate: T,
    params: &MarketParams<T>,
    positions: &[T],
    gain_increments: &[T],
    flow_next: T,
    switch_cost: T,
    dt: T,
) -> T {
    debug_assert_eq!(positions.len(), gain_increments.len());
    let mut drift = short_rate;
    if regime == Regime::Zeta {
        drift += funding_rate(wealth < T::zero(), params);
    }
    let mut w = wealth + drift * wealth * dt;
    for (phi, dg) in positions.iter().zip(gain_increments) {
        w += *phi * *dg;
    }
    w - flow_next - switch_cost
}

/// Wealth paths of one regime hedged standalone: start at the regime value
/// and accumulate the hedge forward until extinction (first default or
/// maturity), frozen afterwards.
#[allow(clippy::too_many_arguments)]
pub fn simulate_wealth<T: Real>(
    regime: Regime,
    surface: &PriceSurface<T>,
    flows: Option<&Array2<T>>,
    positions: &Array3<T>,
    assets: &HedgingAssets<T>,
    params: &MarketParams<T>,
    panel: &ScenarioPanel<T>,
) -> Array2<T> {
    let paths = panel.paths();
    let steps = panel.grid().steps();
    let dt = panel.grid().dt();
    let gains = assets.gains_for(regime);
    let n_assets = gains.len();
    debug_assert_eq!(positions.dim().2, n_assets);

    let w0 = surface.value0();
    let mut wealth = Array2::zeros((paths, steps + 1));
    for p in 0..paths {
        wealth[[p, 0]] = w0;
        let horizon = panel.default_node(p).unwrap_or(steps + 1).min(steps);
        let mut w = w0;
        for k in 0..steps {
            if k >= horizon {
                wealth[[p, k + 1]] = w;
                continue;
            }
            let phi: Vec<T> = (0..n_assets).map(|a| positions[[p, k, a]]).collect();
            let dg: Vec<T> = (0..n_assets).map(|a| gains[a][[p, k]]).collect();
            let flow = flows.map_or(T::zero(), |f| f[[p, k + 1]]);
            w = wealth_step(
                regime,
                w,
                panel.short_rate()[[p, k]],
                params,
                &phi,
                &dg,
                flow,
                T::zero(),
                dt,
            );
            wealth[[p, k + 1]] = w;
        }
    }
    wealth
}

/// Cumulative hedging error of one regime and its realized variance.
#[derive(Debug, Clone)]
pub struct ErrorReport<T> {
    /// `epsilon[[p, k]] = S^C[[p, k]] - W[[p, k]]`, frozen after extinction.
    pub epsilon: Array2<T>,
    /// Sample variance of the error at each path's exit node.
    pub terminal_variance: T,
}

/// Hedging error process: price surface minus wealth, zero at inception by
/// the self-financing initial condition.
pub fn error_process<T: Real>(
    surface: &PriceSurface<T>,
    wealth: &Array2<T>,
    panel: &ScenarioPanel<T>,
) -> ErrorReport<T> {
    let paths = panel.paths();
    let steps = panel.grid().steps();
    let mut epsilon = Array2::zeros((paths, steps + 1));
    let mut terminal = Vec::with_capacity(paths);
    for p in 0..paths {
        let exit = panel.default_node(p).unwrap_or(steps).min(steps);
        for k in 0..=steps {
            let kk = k.min(exit);
            epsilon[[p, k]] = surface.values[[p, kk]] - wealth[[p, kk]];
        }
        terminal.push(epsilon[[p, exit]]);
    }
    let terminal_variance = if paths > 1 {
        sample_variance(&terminal)
    } else {
        T::zero()
    };
    ErrorReport {
        epsilon,
        terminal_variance,
    }
}

/// Complete hedge output for both regimes.
#[derive(Debug, Clone)]
pub struct HedgeReport<T> {
    pub positions_z: Array3<T>,
    pub positions_zeta: Array3<T>,
    pub wealth_z: Array2<T>,
    pub wealth_zeta: Array2<T>,
    pub error_z: ErrorReport<T>,
    pub error_zeta: ErrorReport<T>,
}

impl<T: Real> HedgeReport<T> {
    /// Pooled terminal error variance across the two regimes.
    pub fn pooled_variance(&self) -> T {
        (self.error_z.terminal_variance + self.error_zeta.terminal_variance) / T::of(2.0)
    }

    /// Per-node mean absolute position per asset, as CSV.
    pub fn write_phi_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "regime,node,asset,mean_abs_position")?;
        for (name, phi) in [("z", &self.positions_z), ("zeta", &self.positions_zeta)] {
            let (paths, steps, assets) = phi.dim();
            for k in 0..steps {
                for a in 0..assets {
                    let mut acc = T::zero();
                    for p in 0..paths {
                        acc += phi[[p, k, a]].abs();
                    }
                    writeln!(
                        w,
                        "{},{},{},{}",
                        name,
                        k,
                        a,
                        (acc / T::of_usize(paths)).to_f64_lossy()
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// One self-financing violation: wealth below the switching cost at a
/// recorded switch.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub path: usize,
    pub node: usize,
    pub wealth: f64,
    pub cost: f64,
}

/// Result of the self-financing verification.
#[derive(Debug, Clone, Serialize)]
pub struct SelfFinancingCheck {
    /// Initial wealth equals the initial contract value exactly.
    pub initial_wealth_matches: bool,
    pub violations: Vec<Violation>,
}

impl SelfFinancingCheck {
    pub fn passed(&self) -> bool {
        self.initial_wealth_matches && self.violations.is_empty()
    }
}

/// Verifies `W_0 = S^C_0` and that at every recorded switch the wealth of
/// the regime being entered covers the switching cost. Violations are
/// reported, not thrown.
pub fn check_self_financing<T: Real>(
    report: &HedgeReport<T>,
    policy: &SwitchingPolicy,
    csa: &CsaSpec<T>,
    initial_value: T,
) -> SelfFinancingCheck {
    let w0 = match policy.initial_regime {
        Regime::Z => report.wealth_z[[0, 0]],
        Regime::Zeta => report.wealth_zeta[[0, 0]],
    };
    let initial_wealth_matches = w0 == initial_value;

    let mut violations = Vec::new();
    for (p, switches) in policy.switches.iter().enumerate() {
        for &(node, into) in switches {
            let (wealth, cost) = match into {
                Regime::Z => (report.wealth_z[[p, node]], csa.cost_to_z),
                Regime::Zeta => (report.wealth_zeta[[p, node]], csa.cost_to_zeta),
            };
            let Some(cost) = cost.finite() else {
                continue;
            };
            if wealth < cost {
                violations.push(Violation {
                    path: p,
                    node,
                    wealth: wealth.to_f64_lossy(),
                    cost: cost.to_f64_lossy(),
                });
            }
        }
    }
    SelfFinancingCheck {
        initial_wealth_matches,
        violations,
    }
}
