//! Market simulation: risk factors, short rate, savings account, default
//! intensities and default times on a fixed time grid.
//!
//! The scenario panel produced here is immutable and shared read-only by
//! every downstream module.

mod io;
mod simulate;

pub use simulate::simulate_panel;

use ndarray::{Array2, Array3};

use crate::error::{CoreError, Result};
use crate::scalar::Real;

/// Uniform time grid `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<T> {
    maturity: T,
    steps: usize,
    nodes: Vec<T>,
}

impl<T: Real> TimeGrid<T> {
    pub fn maturity(&self) -> T {
        self.maturity
    }

    /// Number of steps `N`; the grid has `N + 1` nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> T {
        self.nodes[k]
    }

    pub fn dt(&self) -> T {
        self.maturity / T::of_usize(self.steps)
    }
}

/// Builds a uniform grid with `steps + 1` nodes over `[0, maturity]`.
pub fn build_time_grid<T: Real>(maturity: T, steps: usize) -> Result<TimeGrid<T>> {
    if !(maturity > T::zero()) || !maturity.is_finite() {
        return Err(CoreError::invalid(format!(
            "maturity must be positive and finite, got {maturity}"
        )));
    }
    if steps < 2 {
        return Err(CoreError::invalid(format!(
            "grid needs at least 2 steps, got {steps}"
        )));
    }
    let dt = maturity / T::of_usize(steps);
    let mut nodes: Vec<T> = (0..=steps).map(|k| dt * T::of_usize(k)).collect();
    // Pin the last node to the maturity exactly.
    nodes[steps] = maturity;
    Ok(TimeGrid {
        maturity,
        steps,
        nodes,
    })
}

/// Short-rate dynamics.
#[derive(Debug, Clone, PartialEq)]
pub enum ShortRateModel<T> {
    Constant(T),
    /// One-factor mean reversion `dr = speed (level - r) dt + vol dW^1`.
    MeanReverting { r0: T, speed: T, level: T, vol: T },
}

impl<T: Real> ShortRateModel<T> {
    pub fn is_stochastic(&self) -> bool {
        match self {
            ShortRateModel::Constant(_) => false,
            ShortRateModel::MeanReverting { vol, .. } => *vol > T::zero(),
        }
    }

    pub fn initial_rate(&self) -> T {
        match self {
            ShortRateModel::Constant(r) => *r,
            ShortRateModel::MeanReverting { r0, .. } => *r0,
        }
    }
}

/// Funding spreads over the risk-free rate (all per year).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FundingSpreads<T> {
    /// Borrow spread `s` paid when raising cash to post collateral.
    pub borrow: T,
    /// Remuneration spread `bp` received on posted collateral.
    pub collateral_remuneration: T,
    /// Opportunity premium `pi` lost on called (segregated) collateral.
    pub opportunity_premium: T,
    /// Remuneration spread `bp_bar` received from the counterparty.
    pub counterparty_remuneration: T,
}

/// Static market model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams<T> {
    pub initial_spot: T,
    /// Drift of the spot under the pricing measure (set to the short rate
    /// for risk-neutral dynamics).
    pub spot_drift: T,
    pub spot_vol: T,
    pub short_rate: ShortRateModel<T>,
    /// Constant hazard rate of counterparty A.
    pub intensity_a: T,
    /// Constant hazard rate of counterparty B.
    pub intensity_b: T,
    pub recovery_a: T,
    pub recovery_b: T,
    pub funding: FundingSpreads<T>,
    /// Correlation among the Brownian drivers. Driver 0 moves the spot,
    /// driver 1 the short rate when it is mean-reverting; further drivers
    /// are available to synthetic hedging assets.
    pub correlation: Vec<Vec<T>>,
}

impl<T: Real> MarketParams<T> {
    /// Number of Brownian drivers.
    pub fn driver_count(&self) -> usize {
        self.correlation.len().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_spot > T::zero()) {
            return Err(CoreError::invalid("initial spot must be positive"));
        }
        if self.spot_vol < T::zero() {
            return Err(CoreError::invalid("spot vol must be nonnegative"));
        }
        if let ShortRateModel::MeanReverting { vol, speed, .. } = &self.short_rate {
            if *vol < T::zero() || *speed < T::zero() {
                return Err(CoreError::invalid(
                    "short-rate vol and reversion speed must be nonnegative",
                ));
            }
        }
        if self.intensity_a < T::zero() || self.intensity_b < T::zero() {
            return Err(CoreError::invalid("default intensities must be nonnegative"));
        }
        for (name, r) in [("A", self.recovery_a), ("B", self.recovery_b)] {
            if r < T::zero() || r > T::one() {
                return Err(CoreError::invalid(format!(
                    "recovery of {name} must lie in [0, 1]"
                )));
            }
        }
        let d = self.correlation.len();
        if d == 0 {
            return Err(CoreError::invalid("correlation matrix must be non-empty"));
        }
        for row in &self.correlation {
            if row.len() != d {
                return Err(CoreError::invalid("correlation matrix must be square"));
            }
        }
        for i in 0..d {
            let one_off = (self.correlation[i][i] - T::one()).abs();
            if one_off > T::of(1e-12) {
                return Err(CoreError::invalid("correlation diagonal must be 1"));
            }
            for j in 0..i {
                let asym = (self.correlation[i][j] - self.correlation[j][i]).abs();
                if asym > T::of(1e-12) {
                    return Err(CoreError::invalid("correlation matrix must be symmetric"));
                }
            }
        }
        if self.short_rate.is_stochastic() && d < 2 {
            return Err(CoreError::invalid(
                "a mean-reverting rate needs at least 2 Brownian drivers",
            ));
        }
        Ok(())
    }
}

/// The defaulting counterparty of a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defaulter {
    A,
    B,
}

/// Simulated state: one row per path, one column per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPanel<T> {
    grid: TimeGrid<T>,
    paths: usize,
    seed: u64,
    spot: Array2<T>,
    short_rate: Array2<T>,
    bank_account: Array2<T>,
    survival_a: Array2<u8>,
    survival_b: Array2<u8>,
    tau_a: Vec<T>,
    tau_b: Vec<T>,
    tau: Vec<T>,
    /// Brownian increments, `paths x steps x drivers`.
    dw: Array3<T>,
}

impl<T: Real> ScenarioPanel<T> {
    /// Assembles a panel from raw fields, validating the structural
    /// invariants. Used by the simulator, the binary reader and
    /// hand-constructed test scenarios.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        grid: TimeGrid<T>,
        seed: u64,
        spot: Array2<T>,
        short_rate: Array2<T>,
        bank_account: Array2<T>,
        tau_a: Vec<T>,
        tau_b: Vec<T>,
        dw: Array3<T>,
    ) -> Result<ScenarioPanel<T>> {
        let paths = spot.nrows();
        let nodes = grid.steps() + 1;
        if paths == 0 {
            return Err(CoreError::invalid("panel needs at least one path"));
        }
        for (name, a) in [
            ("spot", &spot),
            ("short_rate", &short_rate),
            ("bank_account", &bank_account),
        ] {
            if a.nrows() != paths || a.ncols() != nodes {
                return Err(CoreError::invalid(format!(
                    "{name} must be {paths} x {nodes}, got {} x {}",
                    a.nrows(),
                    a.ncols()
                )));
            }
        }
        if tau_a.len() != paths || tau_b.len() != paths {
            return Err(CoreError::invalid("default-time vectors must match path count"));
        }
        if dw.shape()[0] != paths || dw.shape()[1] != grid.steps() {
            return Err(CoreError::invalid(format!(
                "brownian increments must be {paths} x {} x d",
                grid.steps()
            )));
        }
        for p in 0..paths {
            if (bank_account[[p, 0]] - T::one()).abs() > T::of(1e-12) {
                return Err(CoreError::invalid("bank account must start at 1"));
            }
            if !(tau_a[p] > T::zero()) || !(tau_b[p] > T::zero()) {
                return Err(CoreError::invalid("default times must be positive"));
            }
        }

        let tau: Vec<T> = tau_a
            .iter()
            .zip(&tau_b)
            .map(|(&a, &b)| if a < b { a } else { b })
            .collect();
        let survive = |taus: &[T]| -> Array2<u8> {
            Array2::from_shape_fn((paths, nodes), |(p, k)| u8::from(grid.node(k) < taus[p]))
        };
        let survival_a = survive(&tau_a);
        let survival_b = survive(&tau_b);

        Ok(ScenarioPanel {
            grid,
            paths,
            seed,
            spot,
            short_rate,
            bank_account,
            survival_a,
            survival_b,
            tau_a,
            tau_b,
            tau,
            dw,
        })
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn driver_count(&self) -> usize {
        self.dw.shape()[2]
    }

    pub fn spot(&self) -> &Array2<T> {
        &self.spot
    }

    pub fn short_rate(&self) -> &Array2<T> {
        &self.short_rate
    }

    pub fn bank_account(&self) -> &Array2<T> {
        &self.bank_account
    }

    pub fn survival_a(&self) -> &Array2<u8> {
        &self.survival_a
    }

    pub fn survival_b(&self) -> &Array2<u8> {
        &self.survival_b
    }

    pub fn tau_a(&self) -> &[T] {
        &self.tau_a
    }

    pub fn tau_b(&self) -> &[T] {
        &self.tau_b
    }

    /// First default time `min(tau_a, tau_b)` per path.
    pub fn tau(&self) -> &[T] {
        &self.tau
    }

    pub fn dw(&self) -> &Array3<T> {
        &self.dw
    }

    /// True when no default has occurred strictly before or at `t_k`.
    pub fn is_alive(&self, path: usize, node: usize) -> bool {
        self.grid.node(node) < self.tau[path]
    }

    /// First grid node at or after the first default time, if the default
    /// lands within the horizon.
    pub fn default_node(&self, path: usize) -> Option<usize> {
        let tau = self.tau[path];
        if tau > self.grid.maturity() {
            return None;
        }
        Some(self.grid.nodes().partition_point(|&t| t < tau))
    }

    /// Which counterparty defaults first on this path; `None` when both
    /// survive the horizon. Simultaneous defaults resolve to B.
    pub fn defaulter(&self, path: usize) -> Option<Defaulter> {
        self.default_node(path)?;
        if self.tau_b[path] <= self.tau_a[path] {
            if self.tau_b[path] == self.tau_a[path] {
                log::warn!(
                    "simultaneous default on path {path}; attributing to counterparty B"
                );
            }
            Some(Defaulter::B)
        } else {
            Some(Defaulter::A)
        }
    }
}

/// Joint survival probability `G_t = exp(-(lambda_A + lambda_B) t)` for
/// independent constant-intensity default times.
pub fn survival_probability<T: Real>(params: &MarketParams<T>, t: T) -> Result<T> {
    if t < T::zero() {
        return Err(CoreError::invalid("time must be nonnegative"));
    }
    Ok((-(params.intensity_a + params.intensity_b) * t).exp())
}
