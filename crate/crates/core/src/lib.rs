//! Monte Carlo pricing and hedging of defaultable bilateral contracts with
//! a contingent switching CSA.
//!
//! The crate simulates market, credit and funding state onto a fixed time
//! grid, prices the contract through a system of reflected backward
//! equations with interconnected obstacles solved by regression-based
//! backward induction, extracts the optimal collateral-switching policy,
//! and fits the variance-minimizing hedge with its error process.
//!
//! All numerical routines are generic over the floating-point scalar
//! through [`Real`]; the `*64` aliases below fix f64 for everyday use.

pub mod claim;
pub mod csa;
pub mod error;
pub mod hedging;
pub mod market;
pub mod oracle;
pub mod rbsde;
pub mod regression;
pub mod scalar;
mod util;

pub use error::{CoreError, Result};
pub use scalar::Real;
pub use util::{block_se, det_sum, mean_and_se, sample_variance};

/// f64 scenario panel.
pub type Panel64 = market::ScenarioPanel<f64>;
/// f64 market parameters.
pub type MarketParams64 = market::MarketParams<f64>;
/// f64 time grid.
pub type TimeGrid64 = market::TimeGrid<f64>;
/// f64 claim description.
pub type ClaimSpec64 = claim::ClaimSpec<f64>;
/// f64 price surface.
pub type PriceSurface64 = claim::PriceSurface<f64>;
/// f64 CSA terms.
pub type CsaSpec64 = csa::CsaSpec<f64>;
/// f64 backward problem.
pub type RbsdeProblem64 = rbsde::RbsdeProblem<f64>;
/// f64 solution triple.
pub type RbsdeSolution64 = rbsde::RbsdeSolution<f64>;
/// f64 hedge report.
pub type HedgeReport64 = hedging::HedgeReport<f64>;
