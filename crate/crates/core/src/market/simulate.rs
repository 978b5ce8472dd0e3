//! Forward simulation of the scenario panel.
//!
//! Every path owns an independent ChaCha stream derived from the run seed,
//! so serial and parallel executions produce bit-identical panels.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::scalar::Real;

use super::{MarketParams, ScenarioPanel, ShortRateModel, TimeGrid};

/// Simulates spot, short rate, savings account and default times on the
/// grid, drawing correlated Brownian increments through the Cholesky factor
/// of the driver correlation.
pub fn simulate_panel<T>(
    params: &MarketParams<T>,
    grid: &TimeGrid<T>,
    paths: usize,
    seed: u64,
) -> Result<ScenarioPanel<T>>
where
    T: Real,
    StandardNormal: Distribution<T>,
    Exp1: Distribution<T>,
{
    params.validate()?;
    if paths == 0 {
        return Err(CoreError::invalid("path count must be at least 1"));
    }

    let d = params.driver_count();
    let chol = {
        let flat: Vec<f64> = params
            .correlation
            .iter()
            .flat_map(|row| row.iter().map(|x| x.to_f64_lossy()))
            .collect();
        let m = DMatrix::from_row_slice(d, d, &flat);
        nalgebra::Cholesky::new(m).ok_or_else(|| {
            CoreError::invalid("correlation matrix is not positive definite")
        })?
    };
    let lower: Vec<T> = {
        let l = chol.l();
        let mut out = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..=i {
                out[i * d + j] = T::of(l[(i, j)]);
            }
        }
        out
    };

    let steps = grid.steps();
    let nodes = steps + 1;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let half = T::of(0.5);
    let log_drift = (params.spot_drift - half * params.spot_vol * params.spot_vol) * dt;

    let mut spot = vec![T::zero(); paths * nodes];
    let mut rate = vec![T::zero(); paths * nodes];
    let mut bank = vec![T::zero(); paths * nodes];
    let mut dw = vec![T::zero(); paths * steps * d];
    let mut tau_a = vec![T::zero(); paths];
    let mut tau_b = vec![T::zero(); paths];

    spot.par_chunks_mut(nodes)
        .zip(rate.par_chunks_mut(nodes))
        .zip(bank.par_chunks_mut(nodes))
        .zip(dw.par_chunks_mut(steps * d))
        .zip(tau_a.par_iter_mut())
        .zip(tau_b.par_iter_mut())
        .enumerate()
        .for_each(|(p, (((((s_row, r_row), b_row), w_row), ta), tb))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64 + 1);

            // Default-time exponentials are drawn first so that the Brownian
            // stream is unchanged when intensities vary (common random
            // numbers across intensity/cost ladders).
            let e_a: T = rng.sample(Exp1);
            let e_b: T = rng.sample(Exp1);
            *ta = exp_to_default(e_a, params.intensity_a);
            *tb = exp_to_default(e_b, params.intensity_b);

            s_row[0] = params.initial_spot;
            r_row[0] = params.short_rate.initial_rate();
            b_row[0] = T::one();

            let mut z = vec![T::zero(); d];
            for k in 0..steps {
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                let w_k = &mut w_row[k * d..(k + 1) * d];
                for i in 0..d {
                    let mut acc = T::zero();
                    for j in 0..=i {
                        acc += lower[i * d + j] * z[j];
                    }
                    w_k[i] = acc * sqrt_dt;
                }

                s_row[k + 1] = s_row[k] * (log_drift + params.spot_vol * w_k[0]).exp();
                r_row[k + 1] = match &params.short_rate {
                    ShortRateModel::Constant(r) => *r,
                    ShortRateModel::MeanReverting {
                        speed, level, vol, ..
                    } => r_row[k] + *speed * (*level - r_row[k]) * dt + *vol * w_k[1],
                };
                b_row[k + 1] = b_row[k] * (r_row[k] * dt).exp();
            }
        });

    ScenarioPanel::from_parts(
        grid.clone(),
        seed,
        Array2::from_shape_vec((paths, nodes), spot).expect("spot shape"),
        Array2::from_shape_vec((paths, nodes), rate).expect("rate shape"),
        Array2::from_shape_vec((paths, nodes), bank).expect("bank shape"),
        tau_a,
        tau_b,
        Array3::from_shape_vec((paths, steps, d), dw).expect("dw shape"),
    )
}

/// Inverse-transform default time: `tau = inf{t : lambda t >= E}`.
fn exp_to_default<T: Real>(e: T, intensity: T) -> T {
    if intensity > T::zero() {
        e / intensity
    } else {
        T::infinity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{build_time_grid, FundingSpreads};
    use crate::util::{det_sum, mean_and_se};

    fn params() -> MarketParams<f64> {
        MarketParams {
            initial_spot: 100.0,
            spot_drift: 0.0,
            spot_vol: 0.2,
            short_rate: ShortRateModel::Constant(0.0),
            intensity_a: 0.0,
            intensity_b: 0.0,
            recovery_a: 0.4,
            recovery_b: 0.4,
            funding: FundingSpreads::default(),
            correlation: vec![vec![1.0]],
        }
    }

    #[test]
    fn zero_rate_means_unit_bank_account() {
        let grid = build_time_grid(1.0, 8).unwrap();
        let panel = simulate_panel(&params(), &grid, 64, 7).unwrap();
        for p in 0..panel.paths() {
            for k in 0..=8 {
                assert_eq!(panel.bank_account()[[p, k]], 1.0);
            }
        }
    }

    #[test]
    fn zero_intensity_means_no_defaults() {
        let grid = build_time_grid(1.0, 4).unwrap();
        let panel = simulate_panel(&params(), &grid, 32, 3).unwrap();
        for p in 0..panel.paths() {
            assert_eq!(panel.tau_b()[p], f64::INFINITY);
            assert_eq!(panel.default_node(p), None);
            for k in 0..=4 {
                assert_eq!(panel.survival_b()[[p, k]], 1);
            }
        }
    }

    #[test]
    fn default_probability_matches_exponential_law() {
        // P(tau_A <= 1) = 1 - exp(-0.1) for intensity 0.1.
        let mut pr = params();
        pr.intensity_a = 0.1;
        let grid = build_time_grid(1.0, 4).unwrap();
        let panel = simulate_panel(&pr, &grid, 200_000, 11).unwrap();
        let hits: Vec<f64> = panel
            .tau_a()
            .iter()
            .map(|&t| f64::from(u8::from(t <= 1.0)))
            .collect();
        let (phat, se) = mean_and_se(&hits);
        let p_true = 1.0 - (-0.1f64).exp();
        assert!(
            (phat - p_true).abs() < 3.0 * se,
            "phat={phat} p_true={p_true} se={se}"
        );
    }

    #[test]
    fn same_seed_reproduces_panel_bitwise() {
        let mut pr = params();
        pr.intensity_a = 0.2;
        pr.short_rate = ShortRateModel::MeanReverting {
            r0: 0.02,
            speed: 0.5,
            level: 0.03,
            vol: 0.01,
        };
        pr.correlation = vec![vec![1.0, -0.3], vec![-0.3, 1.0]];
        let grid = build_time_grid(2.0, 12).unwrap();
        let a = simulate_panel(&pr, &grid, 500, 42).unwrap();
        let b = simulate_panel(&pr, &grid, 500, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_panel(&pr, &grid, 500, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn martingale_check_discounted_spot() {
        // With drift = r the discounted spot is a martingale.
        let mut pr = params();
        pr.spot_drift = 0.05;
        pr.short_rate = ShortRateModel::Constant(0.05);
        let grid = build_time_grid(1.0, 16).unwrap();
        let panel = simulate_panel(&pr, &grid, 100_000, 5).unwrap();
        let n = grid.steps();
        let disc: Vec<f64> = (0..panel.paths())
            .map(|p| panel.spot()[[p, n]] / panel.bank_account()[[p, n]])
            .collect();
        let (mean, se) = mean_and_se(&disc);
        assert!(
            (mean - 100.0).abs() < 4.0 * se,
            "mean={mean} se={se}"
        );
    }

    #[test]
    fn survival_indicator_consistent_with_tau() {
        let mut pr = params();
        pr.intensity_a = 0.6;
        pr.intensity_b = 0.4;
        let grid = build_time_grid(1.0, 10).unwrap();
        let panel = simulate_panel(&pr, &grid, 2_000, 9).unwrap();
        for p in 0..panel.paths() {
            assert_eq!(
                panel.tau()[p],
                panel.tau_a()[p].min(panel.tau_b()[p])
            );
            let mut prev = 1u8;
            for k in 0..=10 {
                let s = panel.survival_a()[[p, k]];
                assert_eq!(s == 1, grid.node(k) < panel.tau_a()[p]);
                assert!(s <= prev, "survival indicators must be nonincreasing");
                prev = s;
            }
        }
        // Bank accounts positive and nondecreasing under nonnegative rates.
        let total = det_sum(
            &(0..panel.paths())
                .map(|p| panel.bank_account()[[p, 10]])
                .collect::<Vec<_>>(),
        );
        assert!(total >= panel.paths() as f64);
    }

    #[test]
    fn non_psd_correlation_is_rejected() {
        let mut pr = params();
        pr.correlation = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let grid = build_time_grid(1.0, 4).unwrap();
        assert!(simulate_panel(&pr, &grid, 8, 1).is_err());
    }

    #[test]
    fn zero_paths_is_rejected() {
        let grid = build_time_grid(1.0, 4).unwrap();
        assert!(simulate_panel(&params(), &grid, 0, 1).is_err());
    }
}
