//! Reflected-BSDE solvers: single problems with a fixed obstacle and the
//! two-regime system with interconnected obstacles, both by regression-based
//! backward induction, plus the Snell-envelope cross-check and the optimal
//! switching policy extraction.

mod policy;
mod snell;
mod solver;

pub use policy::extract_policy;
pub use snell::{snell_value, SnellResult};
pub use solver::{solve_single_rbsde, solve_switching_system};

use std::sync::Arc;

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::market::ScenarioPanel;
use crate::scalar::Real;

/// The two collateral regimes: `Z` is zero collateral (full CVA), `Zeta` is
/// full collateral (null CVA, funding active).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Z,
    Zeta,
}

impl Regime {
    pub fn other(self) -> Regime {
        match self {
            Regime::Z => Regime::Zeta,
            Regime::Zeta => Regime::Z,
        }
    }
}

/// Generator (driver) of a backward equation: the `dt`-rate added to the
/// continuation value.
#[derive(Clone)]
pub enum GeneratorSpec<T> {
    /// No dt term.
    Zero,
    /// `-r_t y`: plain discounting at the panel short rate.
    Discount,
    /// `-(r_t + spread(sign y)) y`: discounting plus the funding wedge of
    /// the full-collateral regime.
    DiscountWithFunding {
        /// Spread applied while the value is negative (borrow net of
        /// collateral remuneration).
        negative_spread: T,
        /// Spread applied while the value is positive (counterparty
        /// remuneration net of opportunity premium).
        positive_spread: T,
    },
    /// Arbitrary driver `(node, path, y, n) -> rate`; test problems only.
    Custom(Arc<dyn Fn(usize, usize, T, &[T]) -> T + Send + Sync>),
}

impl<T: Real> GeneratorSpec<T> {
    #[inline]
    pub fn eval(&self, panel: &ScenarioPanel<T>, node: usize, path: usize, y: T, n: &[T]) -> T {
        match self {
            GeneratorSpec::Zero => T::zero(),
            GeneratorSpec::Discount => -panel.short_rate()[[path, node]] * y,
            GeneratorSpec::DiscountWithFunding {
                negative_spread,
                positive_spread,
            } => {
                let spread = if y < T::zero() {
                    *negative_spread
                } else if y > T::zero() {
                    *positive_spread
                } else {
                    T::zero()
                };
                -(panel.short_rate()[[path, node]] + spread) * y
            }
            GeneratorSpec::Custom(f) => f(node, path, y, n),
        }
    }

    /// Lipschitz constant in `y` implied by the structured variants, when
    /// derivable.
    pub fn lipschitz_bound(&self, panel: &ScenarioPanel<T>) -> Option<T> {
        let max_rate = || {
            panel
                .short_rate()
                .iter()
                .fold(T::zero(), |a, &r| a.max(r.abs()))
        };
        match self {
            GeneratorSpec::Zero => Some(T::zero()),
            GeneratorSpec::Discount => Some(max_rate()),
            GeneratorSpec::DiscountWithFunding {
                negative_spread,
                positive_spread,
            } => Some(max_rate() + negative_spread.abs().max(positive_spread.abs())),
            GeneratorSpec::Custom(_) => None,
        }
    }

    /// Samples random argument pairs and verifies the uniform Lipschitz
    /// bound `|f(y1,n1) - f(y2,n2)| <= K (|y1-y2| + |n1-n2|)`.
    pub fn check_lipschitz(
        &self,
        panel: &ScenarioPanel<T>,
        constant: T,
        samples: usize,
        seed: u64,
    ) -> Result<()> {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let steps = panel.grid().steps();
        let d = panel.driver_count();
        for i in 0..samples {
            let k = rng.random_range(0..steps);
            let p = rng.random_range(0..panel.paths());
            let span = 10.0 * (1.0 + i as f64 / samples as f64);
            let y1 = T::of(rng.random_range(-span..span));
            let y2 = T::of(rng.random_range(-span..span));
            let n1: Vec<T> = (0..d).map(|_| T::of(rng.random_range(-span..span))).collect();
            let n2: Vec<T> = (0..d).map(|_| T::of(rng.random_range(-span..span))).collect();
            let lhs = (self.eval(panel, k, p, y1, &n1) - self.eval(panel, k, p, y2, &n2)).abs();
            let n_dist: T = n1
                .iter()
                .zip(&n2)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt();
            let rhs = constant * ((y1 - y2).abs() + n_dist);
            if lhs > rhs + T::of(1e-12) {
                return Err(CoreError::invalid(format!(
                    "generator violates the Lipschitz bound K={constant} at node {k}: \
                     |df|={lhs} > {rhs}"
                )));
            }
        }
        Ok(())
    }
}

impl<T> std::fmt::Debug for GeneratorSpec<T>
where
    T: std::fmt::Debug,
{
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GeneratorSpec::Zero => write!(f, "Zero"),
            GeneratorSpec::Discount => write!(f, "Discount"),
            GeneratorSpec::DiscountWithFunding {
                negative_spread,
                positive_spread,
            } => write!(
                f,
                "DiscountWithFunding {{ negative: {negative_spread:?}, positive: {positive_spread:?} }}"
            ),
            GeneratorSpec::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Obstacle of a reflected problem.
#[derive(Debug, Clone)]
pub enum Obstacle<T> {
    /// Unconstrained (the equation degenerates to a plain BSDE).
    None,
    /// Explicit per-path, per-node lower barrier.
    Grid(Array2<T>),
    /// The other regime's value minus the cost of switching into this
    /// regime; resolved inside the system solver.
    OtherRegimeMinusCost,
}

/// Absorbing boundary: on some paths the recursion terminates early (first
/// default) with a forced value (the close-out amount).
#[derive(Debug, Clone, PartialEq)]
pub struct Absorption<T> {
    /// Absorbing node per path; `None` keeps the path alive to maturity.
    pub node: Vec<Option<usize>>,
    /// Value forced at the absorbing node; later nodes carry zero.
    pub value: Vec<T>,
}

/// A backward problem on the scenario panel.
#[derive(Debug, Clone)]
pub struct RbsdeProblem<T> {
    /// Terminal condition per path.
    pub terminal: Vec<T>,
    /// Discrete cashflows received at each node (amounts, not rates); the
    /// value at node k prices the flows strictly after `t_k`.
    pub flows: Option<Array2<T>>,
    pub generator: GeneratorSpec<T>,
    pub obstacle: Obstacle<T>,
    pub absorption: Option<Absorption<T>>,
    /// Number of Brownian drivers to project the martingale part on.
    pub noise_dim: usize,
}

impl<T: Real> RbsdeProblem<T> {
    pub fn new(terminal: Vec<T>, generator: GeneratorSpec<T>, noise_dim: usize) -> Self {
        RbsdeProblem {
            terminal,
            flows: None,
            generator,
            obstacle: Obstacle::None,
            absorption: None,
            noise_dim,
        }
    }

    pub fn with_obstacle(mut self, obstacle: Obstacle<T>) -> Self {
        self.obstacle = obstacle;
        self
    }

    pub fn with_flows(mut self, flows: Array2<T>) -> Self {
        self.flows = Some(flows);
        self
    }

    pub fn with_absorption(mut self, absorption: Absorption<T>) -> Self {
        self.absorption = Some(absorption);
        self
    }
}

/// Numerical options of the backward solvers.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Extra fixed-point iterations of the implicit generator term after
    /// the explicit predictor step.
    pub generator_iterations: usize,
    /// Tie tolerance for the switching decision, relative to the problem
    /// value scale: reflections below it do not count as switches.
    pub tie_tol_rel: f64,
    /// Complementarity tolerance, relative to the value scale.
    pub complementarity_tol_rel: f64,
    /// Append powers 1..=q of the (scale-normalized) obstacle to the
    /// regression basis; 0 disables the augmentation.
    pub obstacle_basis_powers: usize,
    /// Evaluate each regime's generator at the other regime's continuation
    /// and loadings inside the system recursion (comparison mode for the
    /// alternative reading of the interconnected Snell system).
    pub cross_generator_args: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            generator_iterations: 1,
            tie_tol_rel: 1e-9,
            complementarity_tol_rel: 1e-8,
            obstacle_basis_powers: 0,
            cross_generator_args: false,
        }
    }
}

/// Per-node solver diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct NodeDiagnostics {
    pub node: usize,
    /// Condition number estimate of the regression design matrix.
    pub condition: f64,
    pub effective_rank: usize,
    pub alive_paths: usize,
    /// Total reflection mass added at this node.
    pub reflection_mass: f64,
    /// `max_p A_p * max(Y_p - L_p - tol, 0)` at this node.
    pub complementarity_residual: f64,
    /// Paths whose reflection exceeded the tie tolerance.
    pub binding_paths: usize,
}

/// Diagnostics of one backward solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolverDiagnostics {
    pub value_scale: f64,
    pub nodes: Vec<NodeDiagnostics>,
}

impl SolverDiagnostics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diagnostics serialize")
    }

    pub fn max_complementarity_residual(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.complementarity_residual)
            .fold(0.0, f64::max)
    }
}

/// Ordered switching decisions of one path.
pub type PathSwitches = Vec<(usize, Regime)>;

/// The optimal switching policy extracted from a solved system.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingPolicy {
    pub initial_regime: Regime,
    /// Per path, the ordered `(node, regime switched into)` events.
    pub switches: Vec<PathSwitches>,
}

impl SwitchingPolicy {
    pub fn empty(initial_regime: Regime, paths: usize) -> Self {
        SwitchingPolicy {
            initial_regime,
            switches: vec![Vec::new(); paths],
        }
    }

    pub fn total_switches(&self) -> usize {
        self.switches.iter().map(Vec::len).sum()
    }

    /// Regime occupied at each node by each path (after any switch at that
    /// node).
    pub fn regime_at(&self, path: usize, node: usize) -> Regime {
        let mut regime = self.initial_regime;
        for &(k, into) in &self.switches[path] {
            if k <= node {
                regime = into;
            } else {
                break;
            }
        }
        regime
    }

    /// Expands the policy into the per-path, per-node zero-collateral
    /// indicator (1 on regime z).
    pub fn indicator(&self, nodes: usize) -> crate::csa::RegimeIndicatorPath {
        let paths = self.switches.len();
        let mut z = Array2::from_elem((paths, nodes), 0u8);
        for p in 0..paths {
            for k in 0..nodes {
                z[[p, k]] = u8::from(self.regime_at(p, k) == Regime::Z);
            }
        }
        crate::csa::RegimeIndicatorPath { z }
    }

    /// Checks the structural invariants: strictly increasing switch nodes,
    /// alternating regimes, all within the alive window.
    pub fn validate(&self, panel: &ScenarioPanel<impl Real>) -> Result<()> {
        for (p, sw) in self.switches.iter().enumerate() {
            let mut regime = self.initial_regime;
            let mut last: Option<usize> = None;
            let horizon = panel
                .default_node(p)
                .unwrap_or(panel.grid().steps() + 1);
            for &(k, into) in sw {
                if into == regime {
                    return Err(CoreError::invalid(format!(
                        "path {p}: switch into the current regime at node {k}"
                    )));
                }
                if let Some(prev) = last {
                    if k <= prev {
                        return Err(CoreError::invalid(format!(
                            "path {p}: switch nodes not strictly increasing at {k}"
                        )));
                    }
                }
                if k >= horizon {
                    return Err(CoreError::invalid(format!(
                        "path {p}: switch at node {k} after extinction"
                    )));
                }
                regime = into;
                last = Some(k);
            }
            if sw.len() > panel.grid().steps() {
                return Err(CoreError::invalid(format!(
                    "path {p}: more switches than grid steps"
                )));
            }
        }
        Ok(())
    }
}

/// Solution triple of a reflected problem: value, martingale loadings and
/// reflection increments, plus diagnostics.
#[derive(Debug, Clone)]
pub struct RbsdeSolution<T> {
    /// Value per path per node.
    pub y: Array2<T>,
    /// Martingale-part loadings per path, step and driver.
    pub n: Array3<T>,
    /// Reflection increments per path per node (zero at the last node).
    pub a_increments: Array2<T>,
    /// Switching policy starting from this solution's regime; only present
    /// for system solves.
    pub policy: Option<SwitchingPolicy>,
    pub diagnostics: SolverDiagnostics,
    /// Monte Carlo standard error of the root value.
    pub value0_se: T,
}

impl<T: Real> RbsdeSolution<T> {
    /// Root value (identical across paths: the node-0 state is degenerate).
    pub fn value0(&self) -> T {
        self.y[[0, 0]]
    }
}

/// Structural conformance of a solution against an explicit obstacle grid.
#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    /// `max(L - Y)` over the included nodes (positive = violation).
    pub max_obstacle_violation: f64,
    /// `max_p A * max(Y - L - tol, 0)` over included nodes.
    pub complementarity_residual: f64,
    /// Most negative reflection increment (should be ~0 from below).
    pub min_a_increment: f64,
}

/// Evaluates obstacle domination and discrete complementarity on the nodes
/// selected by `include(path, node)`.
pub fn structure_report<T: Real>(
    solution: &RbsdeSolution<T>,
    obstacle: &Array2<T>,
    tol: T,
    include: impl Fn(usize, usize) -> bool,
) -> StructureReport {
    let (paths, nodes) = solution.y.dim();
    let mut max_violation = f64::NEG_INFINITY;
    let mut comp = 0.0f64;
    let mut min_a = f64::INFINITY;
    for p in 0..paths {
        for k in 0..nodes {
            if !include(p, k) {
                continue;
            }
            let y = solution.y[[p, k]];
            let l = obstacle[[p, k]];
            let a = solution.a_increments[[p, k]];
            max_violation = max_violation.max((l - y).to_f64_lossy());
            let slack = (y - l - tol).pos();
            comp = comp.max((a * slack).to_f64_lossy());
            min_a = min_a.min(a.to_f64_lossy());
        }
    }
    StructureReport {
        max_obstacle_violation: max_violation,
        complementarity_residual: comp,
        min_a_increment: min_a,
    }
}
