//! Run configuration: the TOML schema mirrored onto the core types.

use serde::{Deserialize, Serialize};
use switchcsa_core::claim::{ClaimSpec, CouponRule, Payoff};
use switchcsa_core::csa::{CsaSpec, SwitchCost};
use switchcsa_core::hedging::{DefaultAssetSpec, HedgingAssetsSpec, MarketAssetSpec};
use switchcsa_core::market::{Defaulter, FundingSpreads, MarketParams, ShortRateModel};
use switchcsa_core::rbsde::{Regime, SolverOptions};
use switchcsa_core::regression::{BasisFamily, RegressionSpec};

use crate::EngineError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub maturity: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShortRateConfig {
    Constant { rate: f64 },
    MeanReverting { r0: f64, speed: f64, level: f64, vol: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FundingConfig {
    pub borrow: f64,
    pub collateral_remuneration: f64,
    pub opportunity_premium: f64,
    pub counterparty_remuneration: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub initial_spot: f64,
    pub spot_drift: f64,
    pub spot_vol: f64,
    pub short_rate: ShortRateConfig,
    pub intensity_a: f64,
    pub intensity_b: f64,
    pub recovery_a: f64,
    pub recovery_b: f64,
    #[serde(default)]
    pub funding: FundingConfig,
    #[serde(default = "default_correlation")]
    pub correlation: Vec<Vec<f64>>,
}

fn default_correlation() -> Vec<Vec<f64>> {
    vec![vec![1.0]]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffConfig {
    Fixed { amount: f64 },
    Forward { strike: f64 },
    Call { strike: f64 },
    Put { strike: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouponConfig {
    pub time: f64,
    #[serde(default)]
    pub amount: Option<f64>,
    #[serde(default)]
    pub rate: Option<f64>,
    #[serde(default)]
    pub notional: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimConfig {
    pub terminal: PayoffConfig,
    #[serde(default)]
    pub coupons: Vec<CouponConfig>,
}

/// A switching cost: a number or the string "infinite".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostConfig {
    Finite(f64),
    Sentinel(String),
}

impl CostConfig {
    fn to_cost(&self, name: &str) -> Result<SwitchCost<f64>, EngineError> {
        match self {
            CostConfig::Finite(x) => Ok(SwitchCost::Finite(*x)),
            CostConfig::Sentinel(s) if s == "infinite" => Ok(SwitchCost::Infinite),
            CostConfig::Sentinel(s) => Err(EngineError::Config(format!(
                "{name}: unknown cost sentinel {s:?} (use a number or \"infinite\")"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsaConfig {
    #[serde(default)]
    pub threshold_a: f64,
    #[serde(default)]
    pub threshold_b: f64,
    #[serde(default)]
    pub mta: f64,
    pub cost_to_z: CostConfig,
    pub cost_to_zeta: CostConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RegimeConfig {
    Z,
    Zeta,
}

impl From<RegimeConfig> for Regime {
    fn from(r: RegimeConfig) -> Regime {
        match r {
            RegimeConfig::Z => Regime::Z,
            RegimeConfig::Zeta => Regime::Zeta,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub paths: usize,
    pub seed: u64,
    #[serde(default = "default_regime")]
    pub initial_regime: RegimeConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_regime() -> RegimeConfig {
    RegimeConfig::Z
}

fn default_output_dir() -> String {
    "out".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub family: BasisFamily,
    pub degree: usize,
    /// `None` includes the rate exactly when the short-rate model is
    /// stochastic.
    pub include_rate: Option<bool>,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            family: BasisFamily::Monomial,
            degree: 3,
            include_rate: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceConfig {
    pub tie: f64,
    pub complementarity: f64,
    pub regression_sv: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            tie: 1e-9,
            complementarity: 1e-8,
            regression_sv: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarketAssetConfig {
    Underlying,
    BankAccount,
    Gbm { initial: f64, vol: f64, driver: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefaultAssetConfig {
    pub counterparty: String,
    #[serde(default)]
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HedgingConfig {
    pub market_assets: Vec<MarketAssetConfig>,
    pub default_assets: Vec<DefaultAssetConfig>,
    /// Conditional (state-dependent) hedge regression; turn off to fit one
    /// constant position vector per node.
    pub conditional: bool,
}

impl Default for HedgingConfig {
    fn default() -> Self {
        HedgingConfig {
            market_assets: vec![MarketAssetConfig::Underlying],
            default_assets: Vec::new(),
            conditional: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ToggleConfig {
    /// Evaluate each regime's generator at the other regime's arguments in
    /// the system recursion (the literal reading of the interconnected
    /// stopping system, kept for comparison runs).
    pub cross_generator_args: bool,
    /// Add powers of the obstacle to the regression basis of explicit
    /// obstacle problems.
    pub obstacle_basis_powers: usize,
}

/// The full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub market: MarketConfig,
    pub claim: ClaimConfig,
    pub csa: CsaConfig,
    pub run: RunSection,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    #[serde(default)]
    pub hedging: HedgingConfig,
    #[serde(default)]
    pub toggles: ToggleConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, EngineError> {
        toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, EngineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            EngineError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        RunConfig::from_toml(&text)
    }

    pub fn market_params(&self) -> MarketParams<f64> {
        let m = &self.market;
        MarketParams {
            initial_spot: m.initial_spot,
            spot_drift: m.spot_drift,
            spot_vol: m.spot_vol,
            short_rate: match m.short_rate {
                ShortRateConfig::Constant { rate } => ShortRateModel::Constant(rate),
                ShortRateConfig::MeanReverting {
                    r0,
                    speed,
                    level,
                    vol,
                } => ShortRateModel::MeanReverting {
                    r0,
                    speed,
                    level,
                    vol,
                },
            },
            intensity_a: m.intensity_a,
            intensity_b: m.intensity_b,
            recovery_a: m.recovery_a,
            recovery_b: m.recovery_b,
            funding: FundingSpreads {
                borrow: m.funding.borrow,
                collateral_remuneration: m.funding.collateral_remuneration,
                opportunity_premium: m.funding.opportunity_premium,
                counterparty_remuneration: m.funding.counterparty_remuneration,
            },
            correlation: m.correlation.clone(),
        }
    }

    pub fn claim_spec(&self) -> Result<ClaimSpec<f64>, EngineError> {
        let terminal = match self.claim.terminal {
            PayoffConfig::Fixed { amount } => Payoff::Fixed(amount),
            PayoffConfig::Forward { strike } => Payoff::Forward { strike },
            PayoffConfig::Call { strike } => Payoff::Call { strike },
            PayoffConfig::Put { strike } => Payoff::Put { strike },
        };
        let mut coupons = Vec::with_capacity(self.claim.coupons.len());
        for c in &self.claim.coupons {
            let rule = match (c.amount, c.rate, c.notional) {
                (Some(a), None, None) => CouponRule::Fixed(a),
                (None, Some(rate), Some(notional)) => CouponRule::Rate { rate, notional },
                _ => {
                    return Err(EngineError::Config(format!(
                        "coupon at t={}: give either `amount` or `rate` plus `notional`",
                        c.time
                    )))
                }
            };
            coupons.push((c.time, rule));
        }
        Ok(ClaimSpec { terminal, coupons })
    }

    pub fn csa_spec(&self) -> Result<CsaSpec<f64>, EngineError> {
        Ok(CsaSpec {
            threshold_a: self.csa.threshold_a,
            threshold_b: self.csa.threshold_b,
            mta: self.csa.mta,
            cost_to_z: self.csa.cost_to_z.to_cost("cost_to_z")?,
            cost_to_zeta: self.csa.cost_to_zeta.to_cost("cost_to_zeta")?,
        })
    }

    pub fn regression_spec(&self) -> RegressionSpec {
        let stochastic_rate = matches!(
            self.market.short_rate,
            ShortRateConfig::MeanReverting { vol, .. } if vol > 0.0
        );
        RegressionSpec {
            family: self.regression.family,
            degree: self.regression.degree,
            include_rate: self.regression.include_rate.unwrap_or(stochastic_rate),
            sv_rel_threshold: self.tolerances.regression_sv,
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            generator_iterations: 1,
            tie_tol_rel: self.tolerances.tie,
            complementarity_tol_rel: self.tolerances.complementarity,
            obstacle_basis_powers: self.toggles.obstacle_basis_powers,
            cross_generator_args: self.toggles.cross_generator_args,
        }
    }

    pub fn hedging_spec(&self) -> Result<HedgingAssetsSpec<f64>, EngineError> {
        let market = self
            .hedging
            .market_assets
            .iter()
            .map(|a| match a {
                MarketAssetConfig::Underlying => MarketAssetSpec::Underlying,
                MarketAssetConfig::BankAccount => MarketAssetSpec::BankAccount,
                MarketAssetConfig::Gbm {
                    initial,
                    vol,
                    driver,
                } => MarketAssetSpec::Gbm {
                    initial: *initial,
                    vol: *vol,
                    driver: *driver,
                },
            })
            .collect();
        let mut default_protection = Vec::with_capacity(self.hedging.default_assets.len());
        for d in &self.hedging.default_assets {
            let reference = match d.counterparty.as_str() {
                "A" | "a" => Defaulter::A,
                "B" | "b" => Defaulter::B,
                other => {
                    return Err(EngineError::Config(format!(
                        "default asset counterparty must be A or B, got {other:?}"
                    )))
                }
            };
            default_protection.push(DefaultAssetSpec {
                reference,
                spread: d.spread,
            });
        }
        Ok(HedgingAssetsSpec {
            market,
            default_protection,
        })
    }

    pub fn initial_regime(&self) -> Regime {
        self.run.initial_regime.into()
    }

    /// Structural validation of everything that does not require running
    /// the simulation.
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.grid.maturity <= 0.0 || self.grid.steps < 2 {
            return Err(EngineError::Config(
                "grid needs maturity > 0 and steps >= 2".to_string(),
            ));
        }
        if self.run.paths == 0 {
            return Err(EngineError::Config("paths must be >= 1".to_string()));
        }
        if self.run.paths < 1000 {
            log::warn!(
                "paths = {} is below the recommended 1000 for production runs",
                self.run.paths
            );
        }
        self.market_params()
            .validate()
            .map_err(|e| EngineError::Config(e.to_string()))?;
        self.claim_spec()?;
        self.csa_spec()?
            .validate()
            .map_err(|e| EngineError::Config(e.to_string()))?;
        self.hedging_spec()?;
        if self.regression.degree == 0 {
            return Err(EngineError::Config(
                "regression degree must be at least 1".to_string(),
            ));
        }
        // Coupon times must land on grid nodes.
        let dt = self.grid.maturity / self.grid.steps as f64;
        for c in &self.claim.coupons {
            let ratio = c.time / dt;
            if (ratio - ratio.round()).abs() > 1e-9 || c.time < 0.0 || c.time > self.grid.maturity
            {
                return Err(EngineError::Config(format!(
                    "coupon time {} does not lie on a grid node",
                    c.time
                )));
            }
        }
        Ok(())
    }
}

/// Applies the seed override: the environment variable wins over the
/// config; an explicit CLI value wins over both.
pub fn resolve_seed(config_seed: u64, cli_seed: Option<u64>) -> Result<u64, EngineError> {
    if let Some(s) = cli_seed {
        return Ok(s);
    }
    match std::env::var("SWITCHCSA_SEED") {
        Ok(text) => text
            .parse::<u64>()
            .map_err(|_| EngineError::Config(format!("SWITCHCSA_SEED={text:?} is not a u64"))),
        Err(_) => Ok(config_seed),
    }
}
