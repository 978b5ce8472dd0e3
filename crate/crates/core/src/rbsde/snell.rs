//! Snell-envelope recursion: an independent value estimate for
//! cross-validation of the reflected solver.
//!
//! The recursion is the plain optimal-stopping form
//! `V_k = max(L_k, E[V_{k+1} + flow_{k+1} | state_k] + dt * generator)`,
//! with its own regressions and a one-shot explicit generator step: no
//! reflection bookkeeping, no fixed-point iteration.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::market::ScenarioPanel;
use crate::regression::{DesignMatrix, RegressionSpec};
use crate::scalar::Real;
use crate::util::det_sum;

use super::{Obstacle, RbsdeProblem, SolverOptions};

/// Value process recomputed through the Snell recursion.
pub struct SnellResult<T> {
    pub values: Array2<T>,
    /// Standard error of the root value.
    pub value0_se: T,
}

impl<T: Real> SnellResult<T> {
    pub fn value0(&self) -> T {
        self.values[[0, 0]]
    }
}

/// Runs the backward Snell recursion for a problem. The stopping payoff is
/// the problem's obstacle grid unless `obstacle_override` is supplied (the
/// system cross-check passes the solved other-regime value minus the
/// switching cost).
pub fn snell_value<T: Real>(
    problem: &RbsdeProblem<T>,
    panel: &ScenarioPanel<T>,
    regression: &RegressionSpec,
    options: &SolverOptions,
    obstacle_override: Option<&Array2<T>>,
) -> Result<SnellResult<T>> {
    let paths = panel.paths();
    let steps = panel.grid().steps();
    let nodes = steps + 1;
    let dt = panel.grid().dt();
    let nd = problem.noise_dim;

    if problem.terminal.len() != paths {
        return Err(CoreError::invalid("terminal condition length mismatch"));
    }
    let obstacle: Option<&Array2<T>> = match (obstacle_override, &problem.obstacle) {
        (Some(o), _) => Some(o),
        (None, Obstacle::Grid(grid)) => Some(grid),
        (None, Obstacle::None) => None,
        (None, Obstacle::OtherRegimeMinusCost) => {
            return Err(CoreError::invalid(
                "interconnected obstacle needs an explicit override grid",
            ))
        }
    };
    if let Some(o) = obstacle {
        if o.dim() != (paths, nodes) {
            return Err(CoreError::invalid("obstacle grid shape mismatch"));
        }
    }

    // Value scale for the normalized obstacle columns, mirroring the solver.
    let mut scale = T::one();
    for &x in &problem.terminal {
        scale = scale.max(x.abs());
    }
    if let Some(flows) = &problem.flows {
        for &x in flows {
            scale = scale.max(x.abs());
        }
    }
    if let Some(ab) = &problem.absorption {
        for &x in &ab.value {
            scale = scale.max(x.abs());
        }
    }

    let mut values = Array2::zeros((paths, nodes));
    for p in 0..paths {
        match problem.absorption.as_ref().and_then(|ab| ab.node[p]) {
            None => values[[p, steps]] = problem.terminal[p],
            Some(ka) => values[[p, ka]] = problem.absorption.as_ref().unwrap().value[p],
        }
    }

    let s0 = panel.spot()[[0, 0]];
    let mut value0_se = T::zero();

    for k in (0..steps).rev() {
        let rows: Vec<usize> = match &problem.absorption {
            None => (0..paths).collect(),
            Some(ab) => (0..paths)
                .filter(|&p| ab.node[p].map_or(true, |ka| k < ka))
                .collect(),
        };
        if rows.is_empty() {
            continue;
        }
        let targets: Vec<T> = rows
            .par_iter()
            .map(|&p| {
                let mut t = values[[p, k + 1]];
                if let Some(flows) = &problem.flows {
                    t += flows[[p, k + 1]];
                }
                t
            })
            .collect();
        let noise_of = |continuation: &[T]| -> Vec<Vec<T>> {
            (0..nd)
                .map(|d| {
                    rows.par_iter()
                        .enumerate()
                        .map(|(i, &p)| {
                            (targets[i] - continuation[i]) * panel.dw()[[p, k, d]] / dt
                        })
                        .collect()
                })
                .collect()
        };

        let (continuation, loadings): (Vec<T>, Vec<T>) = if k == 0 {
            let nf = T::of_usize(rows.len());
            let mean = det_sum(&targets) / nf;
            if rows.len() > 1 {
                let sq: Vec<T> = targets.iter().map(|&x| (x - mean) * (x - mean)).collect();
                value0_se = (det_sum(&sq) / (nf - T::one()) / nf).sqrt();
            }
            let continuation = vec![mean; rows.len()];
            let noise = noise_of(&continuation);
            let mut l = vec![T::zero(); rows.len() * nd];
            for (d, nt) in noise.iter().enumerate() {
                let m = det_sum(nt) / nf;
                for i in 0..rows.len() {
                    l[i * nd + d] = m;
                }
            }
            (continuation, l)
        } else {
            let spot_state: Vec<T> = rows.iter().map(|&p| panel.spot()[[p, k]] / s0).collect();
            let rate_state: Vec<T> =
                rows.iter().map(|&p| panel.short_rate()[[p, k]]).collect();
            let obstacle_cols: Vec<Vec<T>> = match obstacle {
                Some(o) if options.obstacle_basis_powers > 0 => (1..=options
                    .obstacle_basis_powers)
                    .map(|pow| {
                        rows.iter()
                            .map(|&p| (o[[p, k]] / scale).powi(pow as i32))
                            .collect()
                    })
                    .collect(),
                _ => Vec::new(),
            };
            let extra: Vec<&[T]> = obstacle_cols.iter().map(|c| c.as_slice()).collect();
            let design = DesignMatrix::build(regression, &spot_state, Some(&rate_state), &extra);
            let fit = design.fit(&[&targets], regression.sv_rel_threshold)?;
            let continuation = fit.fitted[0].clone();
            let mut l = vec![T::zero(); rows.len() * nd];
            if nd > 0 {
                let noise = noise_of(&continuation);
                let refs: Vec<&[T]> = noise.iter().map(|t| t.as_slice()).collect();
                let noise_fit = design.fit(&refs, regression.sv_rel_threshold)?;
                for d in 0..nd {
                    for i in 0..rows.len() {
                        l[i * nd + d] = noise_fit.fitted[d][i];
                    }
                }
            }
            (continuation, l)
        };

        for (i, &p) in rows.iter().enumerate() {
            let n = &loadings[i * nd..(i + 1) * nd];
            let cont =
                continuation[i] + dt * problem.generator.eval(panel, k, p, continuation[i], n);
            let v = match obstacle {
                Some(o) => cont.max(o[[p, k]]),
                None => cont,
            };
            values[[p, k]] = v;
        }
    }

    Ok(SnellResult { values, value0_se })
}
