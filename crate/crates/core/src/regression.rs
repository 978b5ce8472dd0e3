//! Least-squares projection of path functionals onto state basis functions.
//!
//! This is the conditional-expectation estimator used by the pricing
//! surfaces, the backward solvers and the hedge fit. The design matrix is
//! assembled in the working scalar type with a deterministic chunked
//! reduction; the small Gram system is decomposed in f64 via SVD so that
//! rank deficiencies (coincident states, constant columns) resolve to the
//! minimum-norm projection instead of garbage coefficients.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::Real;
use crate::util::CHUNK;

/// Basis family for the scalar state variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    /// Plain monomials `1, u, u^2, ...`.
    Monomial,
    /// Laguerre polynomials, the classic choice for moneyness-like states.
    Laguerre,
    /// Chebyshev polynomials mapped to the per-node state range.
    Chebyshev,
    /// Piecewise-linear splines with `degree - 1` interior knots placed at
    /// per-node state quantiles. Local bases keep regression errors from
    /// propagating across the state space in backward recursions.
    PiecewiseLinear,
}

/// Configuration of the regression basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub family: BasisFamily,
    /// Polynomial degree in the (normalized) spot state.
    pub degree: usize,
    /// Append the short rate as an extra linear regressor. Only sensible
    /// when the rate is stochastic; a constant column would be collinear
    /// with the intercept.
    pub include_rate: bool,
    /// Relative singular-value cutoff for the Gram pseudo-inverse.
    pub sv_rel_threshold: f64,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        RegressionSpec {
            family: BasisFamily::Monomial,
            degree: 3,
            include_rate: false,
            sv_rel_threshold: 1e-12,
        }
    }
}

impl RegressionSpec {
    pub fn monomial(degree: usize) -> Self {
        RegressionSpec {
            degree,
            ..Default::default()
        }
    }

    /// Number of basis columns before extra regressors.
    pub fn base_columns(&self) -> usize {
        self.degree + 1 + usize::from(self.include_rate)
    }
}

/// Dense row-major design matrix for one grid node.
pub struct DesignMatrix<T> {
    data: Vec<T>,
    rows: usize,
    cols: usize,
}

/// Result of a least-squares fit: fitted values per row plus diagnostics.
#[derive(Debug)]
pub struct Fit<T> {
    /// One vector of fitted values per target, aligned with the design rows.
    pub fitted: Vec<Vec<T>>,
    /// Coefficients per target (f64: the solve runs in double precision).
    pub coefficients: Vec<Vec<f64>>,
    /// Estimated condition number of the design matrix.
    pub condition: f64,
    /// Number of singular directions kept.
    pub effective_rank: usize,
}

fn eval_family<T: Real>(family: BasisFamily, degree: usize, u: T, knots: &[T], out: &mut [T]) {
    debug_assert_eq!(out.len(), degree + 1);
    match family {
        BasisFamily::Monomial => {
            let mut p = T::one();
            for slot in out.iter_mut() {
                *slot = p;
                p *= u;
            }
        }
        BasisFamily::Laguerre => {
            // L_0 = 1, L_1 = 1 - u, (k+1) L_{k+1} = (2k+1-u) L_k - k L_{k-1}
            out[0] = T::one();
            if degree >= 1 {
                out[1] = T::one() - u;
            }
            for k in 1..degree {
                let kf = T::of_usize(k);
                let a = (T::of_usize(2 * k) + T::one() - u) * out[k] - kf * out[k - 1];
                out[k + 1] = a / (kf + T::one());
            }
        }
        BasisFamily::Chebyshev => {
            // Caller maps u into [-1, 1]; recurrence T_{k+1} = 2u T_k - T_{k-1}.
            out[0] = T::one();
            if degree >= 1 {
                out[1] = u;
            }
            for k in 1..degree {
                out[k + 1] = T::of(2.0) * u * out[k] - out[k - 1];
            }
        }
        BasisFamily::PiecewiseLinear => {
            // 1, u, then one hinge per interior knot.
            out[0] = T::one();
            if degree >= 1 {
                out[1] = u;
            }
            for (slot, &knot) in out[2..].iter_mut().zip(knots) {
                *slot = (u - knot).pos();
            }
        }
    }
}

/// Interior knots at equally spaced sample quantiles.
fn quantile_knots<T: Real>(values: &[T], count: usize) -> Vec<T> {
    if count == 0 {
        return Vec::new();
    }
    let mut sorted: Vec<T> = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("non-finite state"));
    (1..=count)
        .map(|j| {
            let q = j as f64 / (count + 1) as f64;
            let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
            sorted[idx]
        })
        .collect()
}

impl<T: Real> DesignMatrix<T> {
    /// Builds the design matrix for one node.
    ///
    /// `spot` is the normalized spot state per row. `rate` is appended as a
    /// linear column when the spec asks for it. `extra` columns (e.g. the
    /// obstacle payoff) are appended verbatim.
    pub fn build(
        spec: &RegressionSpec,
        spot: &[T],
        rate: Option<&[T]>,
        extra: &[&[T]],
    ) -> DesignMatrix<T> {
        let rows = spot.len();
        let with_rate = spec.include_rate && rate.is_some();
        let cols = spec.degree + 1 + usize::from(with_rate) + extra.len();

        // Chebyshev needs the per-node state range.
        let (lo, hi) = match spec.family {
            BasisFamily::Chebyshev => {
                let mut lo = T::infinity();
                let mut hi = T::neg_infinity();
                for &u in spot {
                    if u < lo {
                        lo = u;
                    }
                    if u > hi {
                        hi = u;
                    }
                }
                (lo, hi)
            }
            _ => (T::zero(), T::zero()),
        };
        let span = hi - lo;
        let map = move |u: T| -> T {
            if span > T::zero() {
                T::of(2.0) * (u - lo) / span - T::one()
            } else {
                T::zero()
            }
        };
        let knots = match spec.family {
            BasisFamily::PiecewiseLinear => {
                quantile_knots(spot, spec.degree.saturating_sub(1))
            }
            _ => Vec::new(),
        };

        let mut data = vec![T::zero(); rows * cols];
        data.par_chunks_mut(cols)
            .zip(spot.par_iter())
            .enumerate()
            .for_each(|(i, (row, &s))| {
                let u = if spec.family == BasisFamily::Chebyshev {
                    map(s)
                } else {
                    s
                };
                eval_family(
                    spec.family,
                    spec.degree,
                    u,
                    &knots,
                    &mut row[..spec.degree + 1],
                );
                let mut j = spec.degree + 1;
                if with_rate {
                    row[j] = rate.unwrap()[i];
                    j += 1;
                }
                for col in extra {
                    row[j] = col[i];
                    j += 1;
                }
            });

        DesignMatrix { data, rows, cols }
    }

    /// Assembles a design directly from ready-made columns.
    pub fn from_columns(columns: &[Vec<T>]) -> DesignMatrix<T> {
        let cols = columns.len();
        assert!(cols > 0, "design needs at least one column");
        let rows = columns[0].len();
        let mut data = vec![T::zero(); rows * cols];
        for (j, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), rows, "ragged design columns");
            for (i, &x) in col.iter().enumerate() {
                data[i * cols + j] = x;
            }
        }
        DesignMatrix { data, rows, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Entry at (row, column).
    pub fn value(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    /// Solves the least-squares problem for one or more targets sharing this
    /// design. Targets must have `rows` entries each.
    pub fn fit(&self, targets: &[&[T]], sv_rel_threshold: f64) -> Result<Fit<T>> {
        let (n, m) = (self.rows, self.cols);
        if n < m {
            return Err(CoreError::numerical(format!(
                "regression design matrix singular: {n} rows for {m} basis columns \
                 (basis too rich for path count)"
            )));
        }
        for t in targets {
            assert_eq!(t.len(), n, "target length mismatch");
        }

        // Gram matrix and right-hand sides, accumulated chunk-wise in a
        // fixed order so parallel runs reproduce serial runs exactly.
        let nt = targets.len();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(n);
                let mut gram = vec![0.0f64; m * m];
                let mut rhs = vec![0.0f64; m * nt];
                for r in lo..hi {
                    let row = &self.data[r * m..(r + 1) * m];
                    for i in 0..m {
                        let xi = row[i].to_f64_lossy();
                        for j in i..m {
                            gram[i * m + j] += xi * row[j].to_f64_lossy();
                        }
                        for (t, target) in targets.iter().enumerate() {
                            rhs[t * m + i] += xi * target[r].to_f64_lossy();
                        }
                    }
                }
                (gram, rhs)
            })
            .collect();

        let mut gram = vec![0.0f64; m * m];
        let mut rhs = vec![0.0f64; m * nt];
        for (g, r) in partials {
            for (acc, v) in gram.iter_mut().zip(g) {
                *acc += v;
            }
            for (acc, v) in rhs.iter_mut().zip(r) {
                *acc += v;
            }
        }
        // Mirror the upper triangle.
        for i in 0..m {
            for j in 0..i {
                gram[i * m + j] = gram[j * m + i];
            }
        }

        let g = DMatrix::from_row_slice(m, m, &gram);
        let svd = g.clone().svd(true, true);
        let sv_max = svd.singular_values.max();
        if !(sv_max > 0.0) {
            return Err(CoreError::numerical(
                "regression design matrix is identically zero".to_string(),
            ));
        }
        let cut = sv_max * sv_rel_threshold;
        let kept = svd.singular_values.iter().filter(|&&s| s > cut).count();
        let sv_min_kept = svd
            .singular_values
            .iter()
            .filter(|&&s| s > cut)
            .fold(f64::INFINITY, |a, &b| a.min(b));
        // Gram singular values are squares of the design-matrix ones.
        let condition = (sv_max / sv_min_kept).sqrt();

        let mut coefficients = Vec::with_capacity(nt);
        let mut fitted = Vec::with_capacity(nt);
        for t in 0..nt {
            let b = DVector::from_column_slice(&rhs[t * m..(t + 1) * m]);
            let beta = svd
                .solve(&b, cut)
                .map_err(|e| CoreError::numerical(format!("gram svd solve failed: {e}")))?;
            let beta: Vec<f64> = beta.iter().copied().collect();

            let values: Vec<T> = self
                .data
                .par_chunks(m)
                .map(|row| {
                    let mut acc = 0.0f64;
                    for (x, b) in row.iter().zip(&beta) {
                        acc += x.to_f64_lossy() * b;
                    }
                    T::of(acc)
                })
                .collect();
            coefficients.push(beta);
            fitted.push(values);
        }

        Ok(Fit {
            fitted,
            coefficients,
            condition,
            effective_rank: kept,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn recovers_exact_polynomial() {
        let spec = RegressionSpec::monomial(3);
        let spot: Vec<f64> = (0..500).map(|i| 0.5 + i as f64 / 250.0).collect();
        let target: Vec<f64> = spot.iter().map(|&u| 2.0 - u + 0.25 * u * u * u).collect();
        let design = DesignMatrix::build(&spec, &spot, None, &[]);
        let fit = design.fit(&[&target], spec.sv_rel_threshold).unwrap();
        for (f, t) in fit.fitted[0].iter().zip(&target) {
            assert_relative_eq!(f, t, epsilon = 1e-9);
        }
        assert_eq!(fit.effective_rank, 4);
    }

    #[test]
    fn constant_target_fits_to_machine_precision() {
        let spec = RegressionSpec::monomial(3);
        let spot: Vec<f64> = (0..200).map(|i| 0.8 + i as f64 / 500.0).collect();
        let target = vec![1.0f64; 200];
        let design = DesignMatrix::build(&spec, &spot, None, &[]);
        let fit = design.fit(&[&target], spec.sv_rel_threshold).unwrap();
        for f in &fit.fitted[0] {
            assert!((f - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn two_distinct_states_fit_conditional_means_despite_rank_deficiency() {
        // Two distinct states, four columns: rank 2. The projection must
        // still return the exact per-state conditional means.
        let spec = RegressionSpec::monomial(3);
        let spot = vec![1.0f64, 1.0, 2.0, 2.0];
        let target = vec![3.0f64, 5.0, 10.0, 14.0];
        let design = DesignMatrix::build(&spec, &spot, None, &[]);
        let fit = design.fit(&[&target], spec.sv_rel_threshold).unwrap();
        let f = &fit.fitted[0];
        assert_relative_eq!(f[0], 4.0, epsilon = 1e-9);
        assert_relative_eq!(f[1], 4.0, epsilon = 1e-9);
        assert_relative_eq!(f[2], 12.0, epsilon = 1e-9);
        assert_relative_eq!(f[3], 12.0, epsilon = 1e-9);
        assert_eq!(fit.effective_rank, 2);
    }

    #[test]
    fn more_columns_than_rows_is_an_error() {
        let spec = RegressionSpec::monomial(3);
        let spot = vec![1.0f64, 2.0];
        let target = vec![1.0f64, 2.0];
        let design = DesignMatrix::build(&spec, &spot, None, &[]);
        let err = design.fit(&[&target], spec.sv_rel_threshold).unwrap_err();
        assert!(err.to_string().contains("basis too rich"));
    }

    #[test]
    fn laguerre_and_chebyshev_reproduce_monomial_span() {
        let spot: Vec<f64> = (0..300).map(|i| 0.5 + i as f64 / 200.0).collect();
        let target: Vec<f64> = spot.iter().map(|&u| 1.0 + 2.0 * u - u * u).collect();
        for family in [BasisFamily::Laguerre, BasisFamily::Chebyshev] {
            let spec = RegressionSpec {
                family,
                degree: 2,
                ..Default::default()
            };
            let design = DesignMatrix::build(&spec, &spot, None, &[]);
            let fit = design.fit(&[&target], spec.sv_rel_threshold).unwrap();
            for (f, t) in fit.fitted[0].iter().zip(&target) {
                assert_relative_eq!(f, t, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn shared_design_multi_target() {
        let spec = RegressionSpec::monomial(1);
        let spot: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let t1: Vec<f64> = spot.iter().map(|&u| 3.0 * u).collect();
        let t2: Vec<f64> = spot.iter().map(|&u| 1.0 - u).collect();
        let design = DesignMatrix::build(&spec, &spot, None, &[]);
        let fit = design.fit(&[&t1, &t2], spec.sv_rel_threshold).unwrap();
        assert_relative_eq!(fit.coefficients[0][1], 3.0, epsilon = 1e-9);
        assert_relative_eq!(fit.coefficients[1][0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(fit.coefficients[1][1], -1.0, epsilon = 1e-9);
    }
}
