//! Independent reference valuations used to cross-check the solvers: the
//! Black-Scholes closed form, a CRR binomial tree for American exercise,
//! and a small switching lattice priced by brute-force enumeration of every
//! adapted switching strategy.
//!
//! Nothing here shares code with the regression solvers.

use ndarray::{Array2, Array3};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::Result;
use crate::market::{build_time_grid, ScenarioPanel};
use crate::rbsde::Regime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionKind {
    Call,
    Put,
}

/// Black-Scholes price of a European option.
pub fn black_scholes_price(
    kind: OptionKind,
    spot: f64,
    strike: f64,
    rate: f64,
    vol: f64,
    maturity: f64,
) -> f64 {
    let norm = Normal::new(0.0, 1.0).unwrap();
    let sq = vol * maturity.sqrt();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * vol * vol) * maturity) / sq;
    let d2 = d1 - sq;
    let df = (-rate * maturity).exp();
    match kind {
        OptionKind::Call => spot * norm.cdf(d1) - strike * df * norm.cdf(d2),
        OptionKind::Put => strike * df * norm.cdf(-d2) - spot * norm.cdf(-d1),
    }
}

/// Black-Scholes delta.
pub fn black_scholes_delta(
    kind: OptionKind,
    spot: f64,
    strike: f64,
    rate: f64,
    vol: f64,
    maturity: f64,
) -> f64 {
    let norm = Normal::new(0.0, 1.0).unwrap();
    let sq = vol * maturity.sqrt();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * vol * vol) * maturity) / sq;
    match kind {
        OptionKind::Call => norm.cdf(d1),
        OptionKind::Put => norm.cdf(d1) - 1.0,
    }
}

/// American option price on a Cox-Ross-Rubinstein binomial tree.
pub fn binomial_american(
    kind: OptionKind,
    spot: f64,
    strike: f64,
    rate: f64,
    vol: f64,
    maturity: f64,
    steps: usize,
) -> f64 {
    assert!(steps > 0);
    let dt = maturity / steps as f64;
    let up = (vol * dt.sqrt()).exp();
    let down = 1.0 / up;
    let disc = (-rate * dt).exp();
    let p_up = ((rate * dt).exp() - down) / (up - down);
    assert!(
        (0.0..=1.0).contains(&p_up),
        "binomial probability outside [0,1]; refine the grid"
    );

    let payoff = |s: f64| match kind {
        OptionKind::Call => (s - strike).max(0.0),
        OptionKind::Put => (strike - s).max(0.0),
    };

    let mut values: Vec<f64> = (0..=steps)
        .map(|j| payoff(spot * up.powi(j as i32) * down.powi((steps - j) as i32)))
        .collect();
    for i in (0..steps).rev() {
        for j in 0..=i {
            let s = spot * up.powi(j as i32) * down.powi((i - j) as i32);
            let cont = disc * (p_up * values[j + 1] + (1.0 - p_up) * values[j]);
            values[j] = cont.max(payoff(s));
        }
    }
    values[0]
}

/// A binomial lattice contract with regime-dependent node cashflows and
/// switching costs, small enough to price exactly by enumerating every
/// adapted switching strategy.
///
/// Up/down moves are equally likely; rates are zero. Flows are paid at
/// nodes 1..=steps: in regime z the amount is
/// `flow_z_level + flow_z_slope * (S/S0 - 1)` and in regime zeta the
/// constant `flow_zeta_level`. Switch decisions happen at nodes
/// 0..steps (never at maturity) and a switch into regime R costs
/// `cost_into_r`.
#[derive(Debug, Clone)]
pub struct SwitchingLattice {
    pub s0: f64,
    pub up: f64,
    pub down: f64,
    pub steps: usize,
    pub flow_z_level: f64,
    pub flow_z_slope: f64,
    pub flow_zeta_level: f64,
    pub cost_into_z: f64,
    pub cost_into_zeta: f64,
}

/// Exhaustive valuation of a lattice and the strategy achieving it.
#[derive(Debug, Clone)]
pub struct LatticeValuation {
    pub initial_regime: Regime,
    pub value: f64,
    /// Ordered switch events per enumerated path.
    pub switches: Vec<Vec<(usize, Regime)>>,
    /// Margin between the best and the best strictly-worse strategy value.
    pub optimality_gap: f64,
    /// Number of strategies within 1e-12 of the optimum. A well-posed
    /// cross-validation toy has exactly one.
    pub tie_count: usize,
}

impl SwitchingLattice {
    pub fn path_count(&self) -> usize {
        1 << self.steps
    }

    /// Spot of path `p` at node `k`: bit `i` of `p` is the move over step i.
    fn spot_at(&self, p: usize, k: usize) -> f64 {
        let mut s = self.s0;
        for i in 0..k {
            s *= if (p >> i) & 1 == 1 { self.up } else { self.down };
        }
        s
    }

    fn flow(&self, regime: Regime, spot: f64) -> f64 {
        match regime {
            Regime::Z => self.flow_z_level + self.flow_z_slope * (spot / self.s0 - 1.0),
            Regime::Zeta => self.flow_zeta_level,
        }
    }

    fn cost_into(&self, regime: Regime) -> f64 {
        match regime {
            Regime::Z => self.cost_into_z,
            Regime::Zeta => self.cost_into_zeta,
        }
    }

    /// Tree-node index of the depth-`k` prefix of path `p`: prefixes are
    /// numbered level by level, so a strategy is one action per index.
    fn prefix_index(&self, p: usize, k: usize) -> usize {
        // Level k starts at 2^k - 1 and holds 2^k prefixes.
        ((1 << k) - 1) + (p & ((1 << k) - 1))
    }

    fn decision_count(&self) -> usize {
        (1 << self.steps) - 1
    }

    /// Value of one strategy (a stay/switch bit per tree prefix) averaged
    /// over all equally likely paths, plus the realized switch events.
    fn evaluate(
        &self,
        initial_regime: Regime,
        strategy: usize,
    ) -> (f64, Vec<Vec<(usize, Regime)>>) {
        let paths = self.path_count();
        let mut total = 0.0;
        let mut switches = vec![Vec::new(); paths];
        for p in 0..paths {
            let mut regime = initial_regime;
            let mut value = 0.0;
            for k in 0..self.steps {
                if (strategy >> self.prefix_index(p, k)) & 1 == 1 {
                    regime = regime.other();
                    value -= self.cost_into(regime);
                    switches[p].push((k, regime));
                }
                value += self.flow(regime, self.spot_at(p, k + 1));
            }
            total += value;
        }
        (total / paths as f64, switches)
    }

    /// Enumerates all `2^(2^steps - 1)` adapted strategies and returns the
    /// best. This covers every state-dependent policy, not just the
    /// time-deterministic regime sequences.
    pub fn enumerate(&self, initial_regime: Regime) -> LatticeValuation {
        assert!(self.steps <= 4, "enumeration explodes past 4 steps");
        let n_strategies = 1usize << self.decision_count();

        let mut best_value = f64::NEG_INFINITY;
        let mut best_strategy = 0usize;
        for strategy in 0..n_strategies {
            let (value, _) = self.evaluate(initial_regime, strategy);
            if value > best_value {
                best_value = value;
                best_strategy = strategy;
            }
        }
        let mut tie_count = 0usize;
        let mut runner_up = f64::NEG_INFINITY;
        for strategy in 0..n_strategies {
            let (value, _) = self.evaluate(initial_regime, strategy);
            if (value - best_value).abs() <= 1e-12 {
                tie_count += 1;
            } else if value > runner_up {
                runner_up = value;
            }
        }
        let (_, switches) = self.evaluate(initial_regime, best_strategy);
        LatticeValuation {
            initial_regime,
            value: best_value,
            switches,
            optimality_gap: best_value - runner_up,
            tie_count,
        }
    }

    /// The lattice as a scenario panel: every path enumerated once with
    /// equal weight, zero rates, no defaults.
    pub fn panel(&self) -> Result<ScenarioPanel<f64>> {
        let paths = self.path_count();
        let nodes = self.steps + 1;
        let grid = build_time_grid(self.steps as f64, self.steps)?;
        let mut spot = Array2::zeros((paths, nodes));
        for p in 0..paths {
            for k in 0..nodes {
                spot[[p, k]] = self.spot_at(p, k);
            }
        }
        ScenarioPanel::from_parts(
            grid,
            0,
            spot,
            Array2::zeros((paths, nodes)),
            Array2::ones((paths, nodes)),
            vec![f64::INFINITY; paths],
            vec![f64::INFINITY; paths],
            Array3::zeros((paths, self.steps, 1)),
        )
    }

    /// Regime cashflow matrices aligned with [`SwitchingLattice::panel`].
    pub fn flow_matrices(&self) -> (Array2<f64>, Array2<f64>) {
        let paths = self.path_count();
        let nodes = self.steps + 1;
        let mut fz = Array2::zeros((paths, nodes));
        let mut fzeta = Array2::zeros((paths, nodes));
        for p in 0..paths {
            for k in 1..nodes {
                let s = self.spot_at(p, k);
                fz[[p, k]] = self.flow(Regime::Z, s);
                fzeta[[p, k]] = self.flow(Regime::Zeta, s);
            }
        }
        (fz, fzeta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn black_scholes_reference_values() {
        // Frozen from the closed form: S=K=100, r=5%, sigma=20%, T=1.
        let call = black_scholes_price(OptionKind::Call, 100.0, 100.0, 0.05, 0.2, 1.0);
        let put = black_scholes_price(OptionKind::Put, 100.0, 100.0, 0.05, 0.2, 1.0);
        assert_relative_eq!(call, 10.450583572185565, epsilon = 1e-9);
        // Put-call parity: C - P = S - K e^{-rT}.
        assert_relative_eq!(
            call - put,
            100.0 - 100.0 * (-0.05f64).exp(),
            epsilon = 1e-10
        );
        let delta = black_scholes_delta(OptionKind::Call, 100.0, 100.0, 0.05, 0.2, 1.0);
        assert_relative_eq!(delta, 0.6368306511756191, epsilon = 1e-9);
    }

    #[test]
    fn binomial_converges_to_black_scholes_for_european_like_call() {
        // Without dividends the American call never exercises early.
        let tree = binomial_american(OptionKind::Call, 100.0, 100.0, 0.05, 0.2, 1.0, 2000);
        let bs = black_scholes_price(OptionKind::Call, 100.0, 100.0, 0.05, 0.2, 1.0);
        assert!((tree - bs).abs() < 5e-3, "tree={tree} bs={bs}");
    }

    #[test]
    fn binomial_american_put_dominates_european() {
        let am = binomial_american(OptionKind::Put, 100.0, 100.0, 0.05, 0.2, 1.0, 2000);
        let eu = black_scholes_price(OptionKind::Put, 100.0, 100.0, 0.05, 0.2, 1.0);
        assert!(am > eu);
        assert!(am < eu + 2.0);
    }

    #[test]
    fn lattice_no_switch_value_is_plain_expectation() {
        // Infinite costs: value = expected sum of own-regime flows.
        let toy = SwitchingLattice {
            s0: 100.0,
            up: 1.3,
            down: 0.8,
            steps: 3,
            flow_z_level: 0.0,
            flow_z_slope: 1.0,
            flow_zeta_level: 0.05,
            cost_into_z: f64::INFINITY,
            cost_into_zeta: f64::INFINITY,
        };
        let v_zeta = toy.enumerate(Regime::Zeta);
        assert_relative_eq!(v_zeta.value, 3.0 * 0.05, epsilon = 1e-12);
        assert!(v_zeta.switches.iter().all(Vec::is_empty));

        // Regime z: flows are slope * (S_k/S0 - 1); E[S_k/S0] = 1.05^k.
        let v_z = toy.enumerate(Regime::Z);
        let expected = (1..=3).map(|k| 1.05f64.powi(k) - 1.0).sum::<f64>();
        assert_relative_eq!(v_z.value, expected, epsilon = 1e-12);
    }

    #[test]
    fn lattice_switching_adds_value_when_costs_are_small() {
        let toy = SwitchingLattice {
            s0: 100.0,
            up: 1.3,
            down: 0.8,
            steps: 3,
            flow_z_level: 0.0,
            flow_z_slope: 1.0,
            flow_zeta_level: 0.05,
            cost_into_z: 0.1,
            cost_into_zeta: 0.1,
        };
        let frozen = SwitchingLattice {
            cost_into_z: f64::INFINITY,
            cost_into_zeta: f64::INFINITY,
            ..toy.clone()
        };
        let with = toy.enumerate(Regime::Zeta);
        let without = frozen.enumerate(Regime::Zeta);
        assert!(with.value > without.value);
        assert!(with.switches.iter().any(|s| !s.is_empty()));
    }
}
