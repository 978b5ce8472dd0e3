//! Hedging-asset gain processes, variance-minimizing hedge fits, wealth
//! forward accumulation and the self-financing checks.

mod fit;
mod wealth;

pub use fit::{fit_hedge, FittedHedge};
pub use wealth::{
    check_self_financing, error_process, simulate_wealth, wealth_step, ErrorReport,
    HedgeReport, SelfFinancingCheck,
};

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::market::{Defaulter, MarketParams, ScenarioPanel};
use crate::rbsde::Regime;
use crate::scalar::Real;
use crate::util::{block_se, det_sum};

/// A market-risk hedging asset.
#[derive(Debug, Clone, PartialEq)]
pub enum MarketAssetSpec<T> {
    /// The panel's simulated underlying.
    Underlying,
    /// The savings account (gains are identically zero; useful only in
    /// degeneracy tests).
    BankAccount,
    /// An auxiliary lognormal asset with risk-neutral drift, loading on one
    /// of the panel's Brownian drivers.
    Gbm { initial: T, vol: T, driver: usize },
}

/// A default-risk hedging asset: rolling par protection on one
/// counterparty, earning a running spread and paying unit notional at that
/// counterparty's default.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultAssetSpec<T> {
    pub reference: Defaulter,
    /// Running spread; `None` uses the fair spread (the reference
    /// intensity), which makes the gains a martingale.
    pub spread: Option<T>,
}

/// Hedging instrument configuration: `market` instruments are shared by
/// both regimes, `default_protection` trades only in the zero-collateral
/// regime (the funding and default hedging asset sets stay disjoint).
#[derive(Debug, Clone, PartialEq)]
pub struct HedgingAssetsSpec<T> {
    pub market: Vec<MarketAssetSpec<T>>,
    pub default_protection: Vec<DefaultAssetSpec<T>>,
}

impl<T: Real> HedgingAssetsSpec<T> {
    pub fn underlying_only() -> Self {
        HedgingAssetsSpec {
            market: vec![MarketAssetSpec::Underlying],
            default_protection: Vec::new(),
        }
    }
}

/// Simulated gain-increment panels for the configured hedging assets.
///
/// `market_gains[i][[p, k]]` is the step-k gain of market asset i: price
/// increment net of the financing leg accrued at the savings-account growth
/// factor. Default-protection gains earn the spread and lose the notional
/// when the reference name is the first defaulter. All increments stop at
/// the first default.
#[derive(Debug, Clone)]
pub struct HedgingAssets<T> {
    pub market_gains: Vec<Array2<T>>,
    pub default_gains: Vec<Array2<T>>,
    pub names: Vec<String>,
}

impl<T: Real> HedgingAssets<T> {
    /// Market-asset count `l`.
    pub fn market_count(&self) -> usize {
        self.market_gains.len()
    }

    /// Default-asset count `h`.
    pub fn default_count(&self) -> usize {
        self.default_gains.len()
    }

    /// Gain columns for one regime: market assets for both, default
    /// protection only in regime z.
    pub fn gains_for(&self, regime: Regime) -> Vec<&Array2<T>> {
        let mut cols: Vec<&Array2<T>> = self.market_gains.iter().collect();
        if regime == Regime::Z {
            cols.extend(self.default_gains.iter());
        }
        cols
    }

    pub fn names_for(&self, regime: Regime) -> Vec<String> {
        self.names[..self.asset_count(regime)].to_vec()
    }

    pub fn asset_count(&self, regime: Regime) -> usize {
        match regime {
            Regime::Z => self.market_count() + self.default_count(),
            Regime::Zeta => self.market_count(),
        }
    }

    /// Sample mean and 20-block standard error of the discounted cumulative
    /// gain per asset; near-zero means confirm the martingale property.
    pub fn martingale_check(&self, panel: &ScenarioPanel<T>) -> Vec<(String, T, T)> {
        let mut out = Vec::new();
        for (name, gains) in self
            .names
            .iter()
            .zip(self.market_gains.iter().chain(self.default_gains.iter()))
        {
            let totals: Vec<T> = (0..panel.paths())
                .into_par_iter()
                .map(|p| {
                    let mut acc = T::zero();
                    for k in 0..panel.grid().steps() {
                        acc += gains[[p, k]] / panel.bank_account()[[p, k + 1]];
                    }
                    acc
                })
                .collect();
            let mean = det_sum(&totals) / T::of_usize(totals.len());
            let se = block_se(&totals, 20);
            out.push((name.clone(), mean, se));
        }
        out
    }
}

/// Simulates the gain processes of the configured hedging assets on the
/// panel.
pub fn simulate_gains<T: Real>(
    spec: &HedgingAssetsSpec<T>,
    params: &MarketParams<T>,
    panel: &ScenarioPanel<T>,
) -> Result<HedgingAssets<T>> {
    let paths = panel.paths();
    let steps = panel.grid().steps();
    let dt = panel.grid().dt();
    let mut names = Vec::new();

    let mut market_gains = Vec::with_capacity(spec.market.len());
    for (i, asset) in spec.market.iter().enumerate() {
        let gains = match asset {
            MarketAssetSpec::Underlying => {
                names.push(format!("mkt{i}:underlying"));
                price_gains(panel, |p, k| panel.spot()[[p, k]])
            }
            MarketAssetSpec::BankAccount => {
                names.push(format!("mkt{i}:bank"));
                price_gains(panel, |p, k| panel.bank_account()[[p, k]])
            }
            MarketAssetSpec::Gbm {
                initial,
                vol,
                driver,
            } => {
                if *driver >= panel.driver_count() {
                    return Err(CoreError::invalid(format!(
                        "market asset {i} loads on driver {driver}, panel has {}",
                        panel.driver_count()
                    )));
                }
                names.push(format!("mkt{i}:gbm"));
                let half = T::of(0.5);
                let mut price = vec![T::zero(); paths * (steps + 1)];
                price
                    .par_chunks_mut(steps + 1)
                    .enumerate()
                    .for_each(|(p, row)| {
                        row[0] = *initial;
                        for k in 0..steps {
                            let r = panel.short_rate()[[p, k]];
                            let grow = (r - half * *vol * *vol) * dt
                                + *vol * panel.dw()[[p, k, *driver]];
                            row[k + 1] = row[k] * grow.exp();
                        }
                    });
                let price = Array2::from_shape_vec((paths, steps + 1), price).expect("shape");
                price_gains(panel, |p, k| price[[p, k]])
            }
        };
        market_gains.push(gains);
    }

    let mut default_gains = Vec::with_capacity(spec.default_protection.len());
    for (i, asset) in spec.default_protection.iter().enumerate() {
        let intensity = match asset.reference {
            Defaulter::A => params.intensity_a,
            Defaulter::B => params.intensity_b,
        };
        let spread = asset.spread.unwrap_or(intensity);
        names.push(format!(
            "def{i}:{}",
            match asset.reference {
                Defaulter::A => "A",
                Defaulter::B => "B",
            }
        ));
        let mut gains = Array2::zeros((paths, steps));
        for p in 0..paths {
            let death = panel.default_node(p);
            let horizon = death.unwrap_or(steps + 1);
            let pays = death.is_some() && panel.defaulter(p) == Some(asset.reference);
            for k in 0..steps {
                if k >= horizon {
                    break;
                }
                let mut g = spread * dt;
                if pays && k + 1 == horizon {
                    g -= T::one();
                }
                gains[[p, k]] = g;
            }
        }
        default_gains.push(gains);
    }

    Ok(HedgingAssets {
        market_gains,
        default_gains,
        names,
    })
}

/// Gain increments of a dividend-free priced asset: price change net of the
/// financing leg, truncated at the first default.
fn price_gains<T: Real>(
    panel: &ScenarioPanel<T>,
    price: impl Fn(usize, usize) -> T + Sync,
) -> Array2<T> {
    let paths = panel.paths();
    let steps = panel.grid().steps();
    let mut gains = vec![T::zero(); paths * steps];
    gains
        .par_chunks_mut(steps)
        .enumerate()
        .for_each(|(p, row)| {
            let horizon = panel.default_node(p).unwrap_or(steps + 1);
            for (k, slot) in row.iter_mut().enumerate() {
                if k >= horizon {
                    break;
                }
                let a = price(p, k);
                let financing =
                    a * (panel.bank_account()[[p, k + 1]] / panel.bank_account()[[p, k]]
                        - T::one());
                *slot = price(p, k + 1) - a - financing;
            }
        });
    Array2::from_shape_vec((paths, steps), gains).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{build_time_grid, simulate_panel, FundingSpreads, ShortRateModel};

    fn params(lambda_a: f64, lambda_b: f64) -> MarketParams<f64> {
        MarketParams {
            initial_spot: 100.0,
            spot_drift: 0.03,
            spot_vol: 0.2,
            short_rate: ShortRateModel::Constant(0.03),
            intensity_a: lambda_a,
            intensity_b: lambda_b,
            recovery_a: 0.4,
            recovery_b: 0.4,
            funding: FundingSpreads::default(),
            correlation: vec![vec![1.0]],
        }
    }

    #[test]
    fn bank_account_asset_has_zero_gains() {
        let pr = params(0.0, 0.0);
        let grid = build_time_grid(1.0, 8).unwrap();
        let panel = simulate_panel(&pr, &grid, 100, 3).unwrap();
        let spec = HedgingAssetsSpec {
            market: vec![MarketAssetSpec::BankAccount],
            default_protection: vec![],
        };
        let assets = simulate_gains(&spec, &pr, &panel).unwrap();
        assert!(assets.market_gains[0].iter().all(|&g| g.abs() < 1e-14));
    }

    #[test]
    fn zero_vol_asset_with_riskfree_drift_has_zero_gains() {
        let pr = params(0.0, 0.0);
        let grid = build_time_grid(1.0, 8).unwrap();
        let panel = simulate_panel(&pr, &grid, 100, 3).unwrap();
        let spec = HedgingAssetsSpec {
            market: vec![MarketAssetSpec::Gbm {
                initial: 50.0,
                vol: 0.0,
                driver: 0,
            }],
            default_protection: vec![],
        };
        let assets = simulate_gains(&spec, &pr, &panel).unwrap();
        assert!(assets.market_gains[0].iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn underlying_gains_are_centered_at_zero() {
        // r = 0, risk-neutral drift: cumulative gains have zero mean.
        let mut pr = params(0.0, 0.0);
        pr.spot_drift = 0.0;
        pr.short_rate = ShortRateModel::Constant(0.0);
        let grid = build_time_grid(1.0, 16).unwrap();
        let panel = simulate_panel(&pr, &grid, 40_000, 9).unwrap();
        let spec = HedgingAssetsSpec::underlying_only();
        let assets = simulate_gains(&spec, &pr, &panel).unwrap();
        let checks = assets.martingale_check(&panel);
        let (_, mean, se) = &checks[0];
        assert!(mean.abs() < 4.0 * se, "mean={mean} se={se}");
    }

    #[test]
    fn default_protection_at_fair_spread_is_martingale() {
        let pr = params(0.25, 0.0);
        let grid = build_time_grid(1.0, 20).unwrap();
        let panel = simulate_panel(&pr, &grid, 40_000, 21).unwrap();
        let spec = HedgingAssetsSpec {
            market: vec![],
            default_protection: vec![DefaultAssetSpec {
                reference: Defaulter::A,
                spread: None,
            }],
        };
        let assets = simulate_gains(&spec, &pr, &panel).unwrap();
        let checks = assets.martingale_check(&panel);
        let (_, mean, se) = &checks[0];
        assert!(mean.abs() < 4.0 * se, "mean={mean} se={se}");
    }

    #[test]
    fn gains_stop_at_first_default() {
        let pr = params(2.0, 0.0);
        let grid = build_time_grid(1.0, 10).unwrap();
        let panel = simulate_panel(&pr, &grid, 500, 5).unwrap();
        let spec = HedgingAssetsSpec::underlying_only();
        let assets = simulate_gains(&spec, &pr, &panel).unwrap();
        for p in 0..panel.paths() {
            if let Some(d) = panel.default_node(p) {
                for k in d..10 {
                    assert_eq!(assets.market_gains[0][[p, k]], 0.0);
                }
            }
        }
    }
}
