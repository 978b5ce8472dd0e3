//! Forward walk turning reflection increments into switching decisions.

use crate::csa::CsaSpec;
use crate::market::ScenarioPanel;
use crate::scalar::Real;

use super::{RbsdeSolution, Regime, SolverOptions, SwitchingPolicy};

/// Walks each path forward from the initial regime and records a switch at
/// every node where the active regime's value was lifted onto its obstacle
/// by strictly more than the tie tolerance (ties stay in the current
/// regime, so cost-free chattering cannot occur).
pub fn extract_policy<T: Real>(
    solution_z: &RbsdeSolution<T>,
    solution_zeta: &RbsdeSolution<T>,
    csa: &CsaSpec<T>,
    panel: &ScenarioPanel<T>,
    initial_regime: Regime,
    options: &SolverOptions,
) -> SwitchingPolicy {
    let paths = panel.paths();
    let steps = panel.grid().steps();
    let scale = T::of(
        solution_z
            .diagnostics
            .value_scale
            .max(solution_zeta.diagnostics.value_scale),
    );
    let tie = T::of(options.tie_tol_rel) * scale;

    let switches: Vec<_> = (0..paths)
        .map(|p| {
            let mut events = Vec::new();
            let horizon = panel.default_node(p).unwrap_or(steps + 1).min(steps);
            let mut regime = initial_regime;
            for k in 0..horizon {
                let (a, cost) = match regime {
                    Regime::Z => (solution_z.a_increments[[p, k]], csa.cost_to_zeta),
                    Regime::Zeta => (solution_zeta.a_increments[[p, k]], csa.cost_to_z),
                };
                if cost.is_infinite() {
                    continue;
                }
                if a > tie {
                    regime = regime.other();
                    events.push((k, regime));
                }
            }
            events
        })
        .collect();

    SwitchingPolicy {
        initial_regime,
        switches,
    }
}
