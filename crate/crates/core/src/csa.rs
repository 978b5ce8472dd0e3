//! Collateral, bilateral CVA and the funding spread structure, in both the
//! standard and the contingent (regime-switched) form.

use ndarray::Array2;
use rayon::prelude::*;

use crate::claim::PriceSurface;
use crate::error::{CoreError, Result};
use crate::market::{Defaulter, MarketParams, ScenarioPanel};
use crate::regression::{DesignMatrix, RegressionSpec};
use crate::scalar::Real;
use crate::util::det_sum;

/// A switching cost: finite, or the reserved "never switch" sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SwitchCost<T> {
    Finite(T),
    Infinite,
}

impl<T: Real> SwitchCost<T> {
    pub fn is_infinite(&self) -> bool {
        matches!(self, SwitchCost::Infinite)
    }

    /// Finite value, or `None` for the sentinel.
    pub fn finite(&self) -> Option<T> {
        match self {
            SwitchCost::Finite(c) => Some(*c),
            SwitchCost::Infinite => None,
        }
    }
}

/// Credit support annex terms for the contingent switching mechanism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsaSpec<T> {
    /// Threshold of counterparty A, nonpositive by convention.
    pub threshold_a: T,
    /// Threshold of counterparty B, nonnegative by convention.
    pub threshold_b: T,
    /// Minimum transfer amount.
    pub mta: T,
    /// Cost of switching into the zero-collateral regime z.
    pub cost_to_z: SwitchCost<T>,
    /// Cost of switching into the full-collateral regime zeta.
    pub cost_to_zeta: SwitchCost<T>,
}

impl<T: Real> CsaSpec<T> {
    /// Frictionless perfect-collateral terms with the given switching costs.
    pub fn perfect(cost_to_z: SwitchCost<T>, cost_to_zeta: SwitchCost<T>) -> Self {
        CsaSpec {
            threshold_a: T::zero(),
            threshold_b: T::zero(),
            mta: T::zero(),
            cost_to_z,
            cost_to_zeta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold_a > T::zero() {
            return Err(CoreError::invalid("threshold A must be <= 0"));
        }
        if self.threshold_b < T::zero() {
            return Err(CoreError::invalid("threshold B must be >= 0"));
        }
        if self.mta < T::zero() {
            return Err(CoreError::invalid("minimum transfer amount must be >= 0"));
        }
        for (name, c) in [("cost_to_z", self.cost_to_z), ("cost_to_zeta", self.cost_to_zeta)] {
            if let SwitchCost::Finite(v) = c {
                if v < T::zero() || !v.is_finite() {
                    return Err(CoreError::invalid(format!(
                        "{name} must be finite and >= 0 (use the sentinel for no switching)"
                    )));
                }
            }
        }
        // A free round trip between the regimes would allow infinite
        // instantaneous switching.
        if let (Some(a), Some(b)) = (self.cost_to_z.finite(), self.cost_to_zeta.finite()) {
            if a + b <= T::zero() {
                return Err(CoreError::invalid(
                    "switching costs must satisfy cost_to_z + cost_to_zeta > 0",
                ));
            }
        }
        Ok(())
    }
}

/// Per-path, per-node collateral regime indicator: 1 means zero collateral
/// (full CVA), 0 means full collateral (null CVA).
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeIndicatorPath {
    pub z: Array2<u8>,
}

impl RegimeIndicatorPath {
    pub fn all(paths: usize, nodes: usize, z: u8) -> Self {
        RegimeIndicatorPath {
            z: Array2::from_elem((paths, nodes), z),
        }
    }
}

/// Collateral process under thresholds and minimum transfer amount.
///
/// While both parties are alive the account follows the clean price beyond
/// the thresholds; on the one grid step after the first default it stays
/// frozen at the pre-default value; afterwards it is zero.
pub fn collateral<T: Real>(
    clean: &PriceSurface<T>,
    csa: &CsaSpec<T>,
    panel: &ScenarioPanel<T>,
) -> Array2<T> {
    let paths = panel.paths();
    let nodes = panel.grid().steps() + 1;
    let level = |s: T| -> T {
        let mut c = T::zero();
        if s > csa.threshold_b + csa.mta {
            c = s - csa.threshold_b;
        } else if s < csa.threshold_a - csa.mta {
            c = s - csa.threshold_a;
        }
        c
    };
    let mut coll = Array2::zeros((paths, nodes));
    for p in 0..paths {
        let death = panel.default_node(p);
        for k in 0..nodes {
            let alive = death.map_or(true, |d| k < d);
            if alive {
                coll[[p, k]] = level(clean.values[[p, k]]);
            } else if death == Some(k) && k > 0 {
                // One-step post-default window, frozen at the pre-default value.
                coll[[p, k]] = level(clean.values[[p, k - 1]]);
            }
        }
    }
    coll
}

/// Realized discounted default-loss leg seen from node `k`, per path.
///
/// Positive own-default benefit minus counterparty-default loss, both
/// materializing at the first default node when it lands within `(t_k, T]`.
pub fn default_loss_leg<T: Real>(
    clean: &PriceSurface<T>,
    panel: &ScenarioPanel<T>,
    params: &MarketParams<T>,
    path: usize,
    node: usize,
) -> T {
    let Some(k_tau) = panel.default_node(path) else {
        return T::zero();
    };
    if k_tau <= node {
        return T::zero();
    }
    let bank = panel.bank_account();
    let disc = bank[[path, node]] / bank[[path, k_tau]];
    let clean_at_default = clean.values[[path, k_tau]];
    match panel.defaulter(path).expect("defaulted path") {
        Defaulter::B => disc * (T::one() - params.recovery_b) * clean_at_default.neg_part(),
        Defaulter::A => -disc * (T::one() - params.recovery_a) * clean_at_default.pos(),
    }
}

/// Bilateral CVA process estimated by regressing the realized discounted
/// default-loss legs on the state, over paths still alive at each node.
pub fn bcva<T: Real>(
    clean: &PriceSurface<T>,
    panel: &ScenarioPanel<T>,
    params: &MarketParams<T>,
    regression: &RegressionSpec,
) -> Result<PriceSurface<T>> {
    let paths = panel.paths();
    let n = panel.grid().steps();
    let s0 = panel.spot()[[0, 0]];
    let mut values = Array2::zeros((paths, n + 1));
    let mut se0 = T::zero();

    // At the last node the default window (t_N, T] is empty: BCVA_N = 0.
    for k in (0..n).rev() {
        let rows: Vec<usize> = (0..paths).filter(|&p| panel.is_alive(p, k)).collect();
        if rows.is_empty() {
            log::warn!("bcva: no surviving paths at node {k}; value set to 0");
            continue;
        }
        let targets: Vec<T> = rows
            .par_iter()
            .map(|&p| default_loss_leg(clean, panel, params, p, k))
            .collect();
        if k == 0 {
            let nf = T::of_usize(targets.len());
            let mean = det_sum(&targets) / nf;
            if targets.len() > 1 {
                let sq: Vec<T> = targets.iter().map(|&x| (x - mean) * (x - mean)).collect();
                se0 = (det_sum(&sq) / (nf - T::one()) / nf).sqrt();
            }
            for &p in &rows {
                values[[p, 0]] = mean;
            }
        } else {
            let spot_state: Vec<T> = rows.iter().map(|&p| panel.spot()[[p, k]] / s0).collect();
            let rate_state: Vec<T> = rows.iter().map(|&p| panel.short_rate()[[p, k]]).collect();
            let design =
                DesignMatrix::build(regression, &spot_state, Some(rate_state.as_slice()), &[]);
            let fit = design.fit(&[&targets], regression.sv_rel_threshold)?;
            for (i, &p) in rows.iter().enumerate() {
                values[[p, k]] = fit.fitted[0][i];
            }
        }
    }

    Ok(PriceSurface {
        values,
        kind: crate::claim::SurfaceKind::Clean,
        se0,
    })
}

/// Contingent collateral: the collateral process where the full-collateral
/// regime is active, zero in the zero-collateral regime.
pub fn contingent_collateral<T: Real>(
    coll: &Array2<T>,
    regimes: &RegimeIndicatorPath,
) -> Array2<T> {
    assert_eq!(coll.dim(), regimes.z.dim(), "shape mismatch");
    let mut out = coll.clone();
    out.zip_mut_with(&regimes.z, |c, &z| {
        if z == 1 {
            *c = T::zero();
        }
    });
    out
}

/// Contingent BCVA: the BCVA process where the zero-collateral regime is
/// active, zero under full collateral.
pub fn contingent_bcva<T: Real>(
    bcva: &Array2<T>,
    regimes: &RegimeIndicatorPath,
) -> Array2<T> {
    assert_eq!(bcva.dim(), regimes.z.dim(), "shape mismatch");
    let mut out = bcva.clone();
    out.zip_mut_with(&regimes.z, |b, &z| {
        if z == 0 {
            *b = T::zero();
        }
    });
    out
}

/// Funding spread over the risk-free rate applied to a wealth balance of
/// the given sign in the full-collateral regime: borrowing cost net of
/// collateral remuneration for negative balances, counterparty remuneration
/// net of opportunity premium for positive ones.
pub fn funding_rate<T: Real>(wealth_is_negative: bool, params: &MarketParams<T>) -> T {
    if wealth_is_negative {
        params.funding.borrow - params.funding.collateral_remuneration
    } else {
        params.funding.counterparty_remuneration - params.funding.opportunity_premium
    }
}
