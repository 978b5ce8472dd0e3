//! Variance-minimizing hedge fit.
//!
//! Per node, the positions minimize the sample variance of the one-step
//! hedging error across paths. In the conditional form each position is a
//! function of the state expanded on the pricing basis (the design columns
//! are basis-times-gain interactions); the unconditional fallback fits one
//! constant position vector per node.

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::claim::PriceSurface;
use crate::csa::funding_rate;
use crate::error::{CoreError, Result};
use crate::market::{MarketParams, ScenarioPanel};
use crate::rbsde::Regime;
use crate::regression::{DesignMatrix, RegressionSpec};
use crate::scalar::Real;
use crate::util::det_sum;

use super::HedgingAssets;

/// Fitted hedge positions and residual diagnostics.
#[derive(Debug, Clone)]
pub struct FittedHedge<T> {
    pub regime: Regime,
    /// Positions per path, step and asset.
    pub positions: Array3<T>,
    /// Sample variance of the one-step residual error, per node.
    pub residual_variance: Vec<T>,
    /// Sample variance of the unhedged one-step target, per node.
    pub target_variance: Vec<T>,
}

/// Fits the hedge for one regime from its price surface and the gain
/// increments of the regime's asset set.
///
/// `flows` are the regime's contract cashflows (amounts at nodes); the
/// one-step target is the surface increment plus the flow, net of the
/// regime drift (risk-free plus the funding wedge in the full-collateral
/// regime).
#[allow(clippy::too_many_arguments)]
pub fn fit_hedge<T: Real>(
    regime: Regime,
    surface: &PriceSurface<T>,
    flows: Option<&Array2<T>>,
    assets: &HedgingAssets<T>,
    params: &MarketParams<T>,
    panel: &ScenarioPanel<T>,
    regression: &RegressionSpec,
    conditional: bool,
) -> Result<FittedHedge<T>> {
    let paths = panel.paths();
    let steps = panel.grid().steps();
    let dt = panel.grid().dt();
    let gains = assets.gains_for(regime);
    let n_assets = gains.len();
    if n_assets == 0 {
        return Err(CoreError::invalid("no hedging assets configured"));
    }
    let s0 = panel.spot()[[0, 0]];

    let mut positions = Array3::zeros((paths, steps, n_assets));
    let mut residual_variance = Vec::with_capacity(steps);
    let mut target_variance = Vec::with_capacity(steps);

    for k in 0..steps {
        let rows: Vec<usize> = (0..paths).filter(|&p| panel.is_alive(p, k)).collect();
        if rows.len() < 2 {
            residual_variance.push(T::zero());
            target_variance.push(T::zero());
            continue;
        }

        // One-step hedging-error target (the part not explained by phi).
        let targets: Vec<T> = rows
            .par_iter()
            .map(|&p| {
                let y = surface.values[[p, k]];
                let mut drift = panel.short_rate()[[p, k]];
                if regime == Regime::Zeta {
                    drift += funding_rate(y < T::zero(), params);
                }
                let mut t = surface.values[[p, k + 1]] - y - drift * y * dt;
                if let Some(f) = flows {
                    t += f[[p, k + 1]];
                }
                t
            })
            .collect();

        // Degenerate node: nothing moves and nothing needs hedging (e.g. a
        // zero-volatility market). Zero positions, zero residual.
        let target_scale = targets.iter().fold(T::zero(), |a, &t| a.max(t.abs()));
        let gain_scale = gains
            .iter()
            .flat_map(|g| rows.iter().map(|&p| g[[p, k]].abs()))
            .fold(T::zero(), |a, b| a.max(b));
        if gain_scale == T::zero()
            && target_scale <= T::of(1e-12) * T::one().max(surface.value0().abs())
        {
            residual_variance.push(T::zero());
            target_variance.push(T::zero());
            continue;
        }

        // Redundancy check on the raw gain covariance at this node.
        check_gain_rank(&gains, assets, regime, &rows, k)?;

        let gain_rows: Vec<Vec<T>> = (0..n_assets)
            .map(|i| rows.iter().map(|&p| gains[i][[p, k]]).collect())
            .collect();

        let design = if conditional && k > 0 {
            let spot_state: Vec<T> = rows.iter().map(|&p| panel.spot()[[p, k]] / s0).collect();
            let basis = DesignMatrix::build(regression, &spot_state, None, &[]);
            interaction_design(&basis, &gain_rows)
        } else {
            // Node 0 has a degenerate state; fall back to constant positions.
            plain_design(&gain_rows)
        };

        let fit = design.fit(&[&targets], regression.sv_rel_threshold)?;
        let explained = &fit.fitted[0];

        // Positions per path: beta reshaped to (asset, basis) dotted with the
        // basis row.
        let m = design.cols() / n_assets;
        let beta = &fit.coefficients[0];
        if conditional && k > 0 {
            let spot_state: Vec<T> = rows.iter().map(|&p| panel.spot()[[p, k]] / s0).collect();
            let basis = DesignMatrix::build(regression, &spot_state, None, &[]);
            for (i, &p) in rows.iter().enumerate() {
                for a in 0..n_assets {
                    let mut phi = 0.0f64;
                    for j in 0..m {
                        phi += beta[a * m + j] * basis.value(i, j).to_f64_lossy();
                    }
                    positions[[p, k, a]] = T::of(phi);
                }
            }
        } else {
            for &p in &rows {
                for a in 0..n_assets {
                    positions[[p, k, a]] = T::of(beta[a]);
                }
            }
        }

        let residuals: Vec<T> = targets
            .iter()
            .zip(explained)
            .map(|(&t, &e)| t - e)
            .collect();
        residual_variance.push(variance(&residuals));
        target_variance.push(variance(&targets));
    }

    Ok(FittedHedge {
        regime,
        positions,
        residual_variance,
        target_variance,
    })
}

fn variance<T: Real>(xs: &[T]) -> T {
    let nf = T::of_usize(xs.len());
    let mean = det_sum(xs) / nf;
    let sq: Vec<T> = xs.iter().map(|&x| (x - mean) * (x - mean)).collect();
    det_sum(&sq) / (nf - T::one())
}

/// Errors out when the gain columns are linearly dependent, naming the
/// redundant assets.
fn check_gain_rank<T: Real>(
    gains: &[&Array2<T>],
    assets: &HedgingAssets<T>,
    regime: Regime,
    rows: &[usize],
    k: usize,
) -> Result<()> {
    let n = gains.len();
    let mut gram = vec![0.0f64; n * n];
    for &p in rows {
        for i in 0..n {
            let gi = gains[i][[p, k]].to_f64_lossy();
            for j in i..n {
                gram[i * n + j] += gi * gains[j][[p, k]].to_f64_lossy();
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            gram[i * n + j] = gram[j * n + i];
        }
    }
    let g = nalgebra::DMatrix::from_row_slice(n, n, &gram);
    let svd = g.svd(false, false);
    let sv_max = svd.singular_values.max();
    let names = assets.names_for(regime);
    if !(sv_max > 0.0) {
        return Err(CoreError::numerical(format!(
            "gain covariance at node {k} is zero; all assets {names:?} are degenerate"
        )));
    }
    let deficient = svd
        .singular_values
        .iter()
        .any(|&s| s < sv_max * 1e-12);
    if deficient {
        // Name the collinear assets: zero-variance columns first, otherwise
        // the most correlated pair.
        let mut zero_cols: Vec<&str> = Vec::new();
        for i in 0..n {
            if gram[i * n + i] < sv_max * 1e-12 {
                zero_cols.push(&names[i]);
            }
        }
        let culprits = if zero_cols.is_empty() {
            let mut best = (0, 1, 0.0f64);
            for i in 0..n {
                for j in (i + 1)..n {
                    let c = gram[i * n + j].abs()
                        / (gram[i * n + i] * gram[j * n + j]).sqrt().max(1e-300);
                    if c > best.2 {
                        best = (i, j, c);
                    }
                }
            }
            format!("{} and {}", names[best.0], names[best.1])
        } else {
            zero_cols.join(", ")
        };
        return Err(CoreError::numerical(format!(
            "singular gain covariance at node {k}: redundant assets {culprits}"
        )));
    }
    Ok(())
}

/// Design whose columns are the gain increments themselves.
fn plain_design<T: Real>(gain_rows: &[Vec<T>]) -> DesignMatrix<T> {
    DesignMatrix::from_columns(gain_rows)
}

/// Design with one column per (asset, basis function): the entry is
/// `basis_j(state_p) * gain_a[p]`, so the fitted position of asset `a` is
/// the basis expansion with coefficients `beta[a*m..(a+1)*m]`.
fn interaction_design<T: Real>(
    basis: &DesignMatrix<T>,
    gain_rows: &[Vec<T>],
) -> DesignMatrix<T> {
    let rows = gain_rows[0].len();
    let m = basis.cols();
    let mut columns: Vec<Vec<T>> = Vec::with_capacity(gain_rows.len() * m);
    for gain in gain_rows {
        for j in 0..m {
            let col: Vec<T> = (0..rows).map(|i| basis.value(i, j) * gain[i]).collect();
            columns.push(col);
        }
    }
    DesignMatrix::from_columns(&columns)
}
