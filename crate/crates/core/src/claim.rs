//! Contract cashflows and the clean / risky dividend and price processes.
//!
//! The clean side ignores default risk entirely; the risky side truncates
//! cashflows at the first default and pays a recovery-weighted close-out on
//! the clean value.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::market::{Defaulter, ScenarioPanel};
use crate::regression::{DesignMatrix, RegressionSpec};
use crate::scalar::Real;
use crate::util::det_sum;

/// Terminal payoff menu.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payoff<T> {
    /// Fixed amount regardless of the terminal spot (zero-coupon style).
    Fixed(T),
    /// Linear forward-style payoff `S_T - K`.
    Forward { strike: T },
    /// `(S_T - K)^+`.
    Call { strike: T },
    /// `(K - S_T)^+`.
    Put { strike: T },
}

impl<T: Real> Payoff<T> {
    pub fn eval(&self, terminal_spot: T) -> T {
        match *self {
            Payoff::Fixed(x) => x,
            Payoff::Forward { strike } => terminal_spot - strike,
            Payoff::Call { strike } => (terminal_spot - strike).pos(),
            Payoff::Put { strike } => (strike - terminal_spot).pos(),
        }
    }

    /// True when the payoff cannot be negative (used by the reporting floor).
    pub fn is_nonnegative(&self) -> bool {
        matches!(
            self,
            Payoff::Call { .. } | Payoff::Put { .. }
        )
    }
}

/// Coupon amount rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CouponRule<T> {
    Fixed(T),
    /// `rate x notional`.
    Rate { rate: T, notional: T },
}

impl<T: Real> CouponRule<T> {
    pub fn amount(&self) -> T {
        match *self {
            CouponRule::Fixed(x) => x,
            CouponRule::Rate { rate, notional } => rate * notional,
        }
    }
}

/// Promised cashflows of the bilateral contract.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaimSpec<T> {
    pub terminal: Payoff<T>,
    /// Coupons as (payment time, amount rule); times must be grid nodes.
    pub coupons: Vec<(T, CouponRule<T>)>,
}

impl<T: Real> ClaimSpec<T> {
    pub fn new(terminal: Payoff<T>) -> Self {
        ClaimSpec {
            terminal,
            coupons: Vec::new(),
        }
    }

    pub fn with_coupons(mut self, coupons: Vec<(T, CouponRule<T>)>) -> Self {
        self.coupons = coupons;
        self
    }

    /// Maps each coupon to its grid node index.
    fn coupon_nodes(&self, panel: &ScenarioPanel<T>) -> Result<Vec<(usize, T)>> {
        let grid = panel.grid();
        let tol = grid.dt() * T::of(1e-9);
        let mut out = Vec::with_capacity(self.coupons.len());
        for (time, rule) in &self.coupons {
            let k = grid.nodes().partition_point(|&t| t < *time - tol);
            if k > grid.steps() || (grid.node(k) - *time).abs() > tol {
                return Err(CoreError::invalid(format!(
                    "coupon time {time} does not lie on a grid node"
                )));
            }
            out.push((k, rule.amount()));
        }
        Ok(out)
    }
}

/// Which process a surface or ledger describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    Clean,
    Risky,
    RegimeZ,
    RegimeZeta,
}

/// Per-path, per-node cashflow amounts: `amounts[[p, k]]` is paid at `t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CashflowLedger<T> {
    pub amounts: Array2<T>,
    pub kind: SurfaceKind,
}

impl<T: Real> CashflowLedger<T> {
    /// Discounted value at node `k` of the flows strictly after `t_k`
    /// (the regression target of the price estimator).
    fn discounted_remaining(&self, panel: &ScenarioPanel<T>, path: usize, node: usize) -> T {
        let bank = panel.bank_account();
        let mut acc = T::zero();
        for j in (node + 1)..=panel.grid().steps() {
            let a = self.amounts[[path, j]];
            if a != T::zero() {
                acc += a * bank[[path, node]] / bank[[path, j]];
            }
        }
        acc
    }
}

/// Price estimates per path per node.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSurface<T> {
    pub values: Array2<T>,
    pub kind: SurfaceKind,
    /// Standard error of the node-0 estimate (a plain Monte Carlo mean).
    pub se0: T,
}

impl<T: Real> PriceSurface<T> {
    /// Value at the root node (identical across paths by construction).
    pub fn value0(&self) -> T {
        self.values[[0, 0]]
    }

    /// Copy with negative values clipped to zero; reporting only, never fed
    /// back into a recursion.
    pub fn floored_nonneg(&self) -> PriceSurface<T> {
        let mut v = self.values.clone();
        v.mapv_inplace(|x| x.pos());
        PriceSurface {
            values: v,
            kind: self.kind,
            se0: self.se0,
        }
    }

    /// CSV rows `path,node,value`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "path,node,value")?;
        for ((p, k), v) in self.values.indexed_iter() {
            writeln!(w, "{},{},{}", p, k, v.to_f64_lossy())?;
        }
        Ok(())
    }
}

/// Clean dividend ledger: coupons plus the terminal payoff, no default
/// truncation.
pub fn clean_dividends<T: Real>(
    claim: &ClaimSpec<T>,
    panel: &ScenarioPanel<T>,
) -> Result<CashflowLedger<T>> {
    let coupons = claim.coupon_nodes(panel)?;
    let n = panel.grid().steps();
    let mut amounts = Array2::zeros((panel.paths(), n + 1));
    for p in 0..panel.paths() {
        for &(k, a) in &coupons {
            amounts[[p, k]] += a;
        }
        amounts[[p, n]] += claim.terminal.eval(panel.spot()[[p, n]]);
    }
    Ok(CashflowLedger {
        amounts,
        kind: SurfaceKind::Clean,
    })
}

/// Close-out amount at the default node per the bilateral recovery rule:
/// the surviving party receives recovery on what it is owed and pays in
/// full what it owes.
pub fn close_out_value<T: Real>(
    clean_at_default: T,
    defaulter: Defaulter,
    recovery_a: T,
    recovery_b: T,
) -> T {
    match defaulter {
        Defaulter::A => recovery_a * clean_at_default.pos() - clean_at_default.neg_part(),
        Defaulter::B => clean_at_default.pos() - recovery_b * clean_at_default.neg_part(),
    }
}

/// Risky dividend ledger: coupons while both parties are alive, the
/// terminal payoff only if no default occurs, and the close-out flow at the
/// first default node.
pub fn risky_dividends<T: Real>(
    claim: &ClaimSpec<T>,
    panel: &ScenarioPanel<T>,
    clean: &PriceSurface<T>,
    recovery_a: T,
    recovery_b: T,
) -> Result<CashflowLedger<T>> {
    let coupons = claim.coupon_nodes(panel)?;
    let n = panel.grid().steps();
    let mut amounts = Array2::zeros((panel.paths(), n + 1));
    for p in 0..panel.paths() {
        let death = panel.default_node(p);
        let horizon = death.unwrap_or(n + 1);
        for &(k, a) in &coupons {
            if k < horizon {
                amounts[[p, k]] += a;
            }
        }
        match death {
            None => amounts[[p, n]] += claim.terminal.eval(panel.spot()[[p, n]]),
            Some(k_tau) => {
                let defaulter = panel.defaulter(p).expect("defaulted path");
                amounts[[p, k_tau]] += close_out_value(
                    clean.values[[p, k_tau]],
                    defaulter,
                    recovery_a,
                    recovery_b,
                );
            }
        }
    }
    Ok(CashflowLedger {
        amounts,
        kind: SurfaceKind::Risky,
    })
}

/// Price surface from a cashflow ledger by least-squares projection of the
/// path-wise discounted remaining cashflows onto the state basis.
///
/// Node `N` carries the terminal amounts exactly (no regression); node `0`
/// is the plain sample mean because the state there is degenerate. When
/// `alive_only` is set, nodes see only paths with no default so far and
/// defaulted paths carry zero.
pub fn price_from_ledger<T: Real>(
    ledger: &CashflowLedger<T>,
    panel: &ScenarioPanel<T>,
    regression: &RegressionSpec,
    alive_only: bool,
) -> Result<PriceSurface<T>> {
    let n = panel.grid().steps();
    let paths = panel.paths();
    let s0 = panel.spot()[[0, 0]];
    let mut values = Array2::zeros((paths, n + 1));

    // Terminal node: the ledger amount at N is the terminal rule.
    for p in 0..paths {
        values[[p, n]] = ledger.amounts[[p, n]];
    }

    let mut se0 = T::zero();
    for k in (0..n).rev() {
        let rows: Vec<usize> = if alive_only {
            (0..paths).filter(|&p| panel.is_alive(p, k)).collect()
        } else {
            (0..paths).collect()
        };
        if rows.is_empty() {
            log::warn!("no surviving paths at node {k}; values set to 0");
            continue;
        }
        let targets: Vec<T> = rows
            .par_iter()
            .map(|&p| ledger.discounted_remaining(panel, p, k))
            .collect();

        if k == 0 {
            let mean = det_sum(&targets) / T::of_usize(targets.len());
            let sq: Vec<T> = targets.iter().map(|&x| (x - mean) * (x - mean)).collect();
            let nf = T::of_usize(targets.len());
            se0 = if targets.len() > 1 {
                (det_sum(&sq) / (nf - T::one()) / nf).sqrt()
            } else {
                T::zero()
            };
            for &p in &rows {
                values[[p, 0]] = mean;
            }
        } else {
            let spot_state: Vec<T> = rows.iter().map(|&p| panel.spot()[[p, k]] / s0).collect();
            let rate_state: Vec<T> = rows.iter().map(|&p| panel.short_rate()[[p, k]]).collect();
            let design = DesignMatrix::build(
                regression,
                &spot_state,
                Some(rate_state.as_slice()),
                &[],
            );
            let fit = design.fit(&[&targets], regression.sv_rel_threshold)?;
            for (i, &p) in rows.iter().enumerate() {
                values[[p, k]] = fit.fitted[0][i];
            }
        }
    }

    Ok(PriceSurface {
        values,
        kind: ledger.kind,
        se0,
    })
}

/// Clean (counterparty-risk-free) price surface.
pub fn clean_price<T: Real>(
    claim: &ClaimSpec<T>,
    panel: &ScenarioPanel<T>,
    regression: &RegressionSpec,
) -> Result<PriceSurface<T>> {
    let ledger = clean_dividends(claim, panel)?;
    price_from_ledger(&ledger, panel, regression, false)
}

/// Risky price surface (the NPV of the default-truncated ledger), computed
/// with the same regression machinery as the clean price.
pub fn risky_price<T: Real>(
    claim: &ClaimSpec<T>,
    panel: &ScenarioPanel<T>,
    clean: &PriceSurface<T>,
    recovery_a: T,
    recovery_b: T,
    regression: &RegressionSpec,
) -> Result<PriceSurface<T>> {
    let ledger = risky_dividends(claim, panel, clean, recovery_a, recovery_b)?;
    price_from_ledger(&ledger, panel, regression, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{
        build_time_grid, simulate_panel, FundingSpreads, MarketParams, ShortRateModel,
    };
    use approx::assert_relative_eq;

    fn params(r: f64) -> MarketParams<f64> {
        MarketParams {
            initial_spot: 100.0,
            spot_drift: r,
            spot_vol: 0.2,
            short_rate: ShortRateModel::Constant(r),
            intensity_a: 0.0,
            intensity_b: 0.0,
            recovery_a: 0.4,
            recovery_b: 0.4,
            funding: FundingSpreads::default(),
            correlation: vec![vec![1.0]],
        }
    }

    #[test]
    fn zero_coupon_unit_claim_single_flow() {
        let grid = build_time_grid(1.0, 4).unwrap();
        let panel = simulate_panel(&params(0.0), &grid, 100, 1).unwrap();
        let claim = ClaimSpec::new(Payoff::Fixed(1.0));
        let ledger = clean_dividends(&claim, &panel).unwrap();
        for p in 0..100 {
            for k in 0..4 {
                assert_eq!(ledger.amounts[[p, k]], 0.0);
            }
            assert_eq!(ledger.amounts[[p, 4]], 1.0);
        }
    }

    #[test]
    fn coupons_land_on_their_nodes() {
        let grid = build_time_grid(1.0, 4).unwrap();
        let panel = simulate_panel(&params(0.0), &grid, 10, 1).unwrap();
        let claim = ClaimSpec::new(Payoff::Fixed(0.0)).with_coupons(vec![
            (0.5, CouponRule::Fixed(2.0)),
            (1.0, CouponRule::Fixed(2.0)),
        ]);
        let ledger = clean_dividends(&claim, &panel).unwrap();
        for p in 0..10 {
            assert_eq!(ledger.amounts[[p, 2]], 2.0);
            assert_eq!(ledger.amounts[[p, 4]], 2.0);
            assert_eq!(ledger.amounts[[p, 1]], 0.0);
        }
    }

    #[test]
    fn off_grid_coupon_is_rejected() {
        let grid = build_time_grid(1.0, 4).unwrap();
        let panel = simulate_panel(&params(0.0), &grid, 10, 1).unwrap();
        let claim =
            ClaimSpec::new(Payoff::Fixed(0.0)).with_coupons(vec![(0.3, CouponRule::Fixed(1.0))]);
        assert!(clean_dividends(&claim, &panel).is_err());
    }

    #[test]
    fn forward_payoff_cashflow() {
        let grid = build_time_grid(1.0, 4).unwrap();
        let panel = simulate_panel(&params(0.0), &grid, 50, 2).unwrap();
        let claim = ClaimSpec::new(Payoff::Forward { strike: 100.0 });
        let ledger = clean_dividends(&claim, &panel).unwrap();
        for p in 0..50 {
            assert_eq!(ledger.amounts[[p, 4]], panel.spot()[[p, 4]] - 100.0);
        }
    }

    #[test]
    fn unit_claim_zero_rate_prices_to_one_everywhere() {
        let grid = build_time_grid(1.0, 5).unwrap();
        let panel = simulate_panel(&params(0.0), &grid, 500, 3).unwrap();
        let claim = ClaimSpec::new(Payoff::Fixed(1.0));
        let surf = clean_price(&claim, &panel, &RegressionSpec::monomial(3)).unwrap();
        for ((_, _), v) in surf.values.indexed_iter() {
            assert!((v - 1.0).abs() < 1e-10, "v={v}");
        }
    }

    #[test]
    fn unit_claim_discounts_at_constant_rate() {
        let grid = build_time_grid(1.0, 5).unwrap();
        let panel = simulate_panel(&params(0.05), &grid, 500, 3).unwrap();
        let claim = ClaimSpec::new(Payoff::Fixed(1.0));
        let surf = clean_price(&claim, &panel, &RegressionSpec::monomial(3)).unwrap();
        assert_relative_eq!(surf.value0(), (-0.05f64).exp(), epsilon = 1e-10);
    }

    #[test]
    fn call_price_matches_black_scholes() {
        let grid = build_time_grid(1.0, 8).unwrap();
        let panel = simulate_panel(&params(0.05), &grid, 60_000, 17).unwrap();
        let claim = ClaimSpec::new(Payoff::Call { strike: 100.0 });
        let surf = clean_price(&claim, &panel, &RegressionSpec::monomial(3)).unwrap();
        let bs = crate::oracle::black_scholes_price(
            crate::oracle::OptionKind::Call,
            100.0,
            100.0,
            0.05,
            0.2,
            1.0,
        );
        assert!(
            (surf.value0() - bs).abs() < 3.0 * surf.se0,
            "mc={} bs={bs} se={}",
            surf.value0(),
            surf.se0
        );
    }

    #[test]
    fn terminal_node_is_exact_payoff() {
        let grid = build_time_grid(1.0, 4).unwrap();
        let panel = simulate_panel(&params(0.05), &grid, 200, 5).unwrap();
        let claim = ClaimSpec::new(Payoff::Call { strike: 100.0 });
        let surf = clean_price(&claim, &panel, &RegressionSpec::monomial(3)).unwrap();
        for p in 0..200 {
            assert_eq!(
                surf.values[[p, 4]],
                (panel.spot()[[p, 4]] - 100.0).max(0.0)
            );
        }
    }

    #[test]
    fn call_surface_reporting_floor_is_nonnegative() {
        let grid = build_time_grid(1.0, 6).unwrap();
        let panel = simulate_panel(&params(0.0), &grid, 2_000, 8).unwrap();
        let claim = ClaimSpec::new(Payoff::Call { strike: 120.0 });
        let surf = clean_price(&claim, &panel, &RegressionSpec::monomial(3)).unwrap();
        let floored = surf.floored_nonneg();
        assert!(floored.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn risky_ledger_without_defaults_equals_clean() {
        let grid = build_time_grid(1.0, 4).unwrap();
        let panel = simulate_panel(&params(0.0), &grid, 100, 6).unwrap();
        let claim = ClaimSpec::new(Payoff::Forward { strike: 90.0 });
        let spec = RegressionSpec::monomial(3);
        let clean = clean_price(&claim, &panel, &spec).unwrap();
        let clean_ledger = clean_dividends(&claim, &panel).unwrap();
        let risky = risky_dividends(&claim, &panel, &clean, 0.4, 0.4).unwrap();
        assert_eq!(clean_ledger.amounts, risky.amounts);
    }

    #[test]
    fn full_recovery_close_out_equals_clean_value_at_default() {
        let mut pr = params(0.0);
        pr.intensity_b = 1.5;
        let grid = build_time_grid(1.0, 4).unwrap();
        let panel = simulate_panel(&pr, &grid, 400, 10).unwrap();
        let claim = ClaimSpec::new(Payoff::Forward { strike: 100.0 });
        let spec = RegressionSpec::monomial(3);
        let clean = clean_price(&claim, &panel, &spec).unwrap();
        let risky = risky_dividends(&claim, &panel, &clean, 1.0, 1.0).unwrap();
        let mut saw_default = false;
        for p in 0..panel.paths() {
            if let Some(k) = panel.default_node(p) {
                saw_default = true;
                assert_relative_eq!(
                    risky.amounts[[p, k]],
                    clean.values[[p, k]],
                    epsilon = 1e-12
                );
            }
        }
        assert!(saw_default, "needs at least one defaulted path");
    }

    #[test]
    fn close_out_sign_conventions() {
        // Defaulter A, negative clean value: survivor still owes in full.
        assert_eq!(close_out_value(-5.0, Defaulter::A, 0.4, 0.6), -5.0);
        // Defaulter A, positive clean value: recovery on what A owes.
        assert_eq!(close_out_value(10.0, Defaulter::A, 0.4, 0.6), 4.0);
        // Defaulter B, negative clean value: pay only recovery.
        assert_eq!(close_out_value(-5.0, Defaulter::B, 0.4, 0.6), -3.0);
        // Defaulter B, positive clean value: owed in full.
        assert_eq!(close_out_value(10.0, Defaulter::B, 0.4, 0.6), 10.0);
    }
}
