//! Backward regression sweeps for single reflected problems and for the
//! two-regime system with interconnected obstacles.
//!
//! Per node k (from N-1 down to 0) the scheme is
//!   1. continuation `C = E[Y_{k+1} + flow_{k+1} | state_k]` by regression,
//!   2. loadings `N_k` from regressing the same target times `dW_k / dt`,
//!   3. pre-reflection value from the generator, implicit in Y through
//!      fixed-point iterations seeded by the explicit step,
//!   4. reflection `Y = max(pre, L)` with the pushed mass recorded in A.
//!
//! The node-0 state is degenerate (every path starts at the same point), so
//! the projection there is the plain sample mean.

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::csa::CsaSpec;
use crate::error::{CoreError, Result};
use crate::market::ScenarioPanel;
use crate::regression::{DesignMatrix, RegressionSpec};
use crate::scalar::Real;
use crate::util::det_sum;

use super::{
    extract_policy, NodeDiagnostics, Obstacle, RbsdeProblem, RbsdeSolution, Regime,
    SolverDiagnostics, SolverOptions,
};

/// Outcome of the regression step at one node.
struct NodeFit<T> {
    /// Continuation values aligned with the alive rows.
    continuation: Vec<T>,
    /// Loadings, `rows.len() x noise_dim` row-major.
    loadings: Vec<T>,
    condition: f64,
    effective_rank: usize,
}

struct Sweep<'a, T: Real> {
    panel: &'a ScenarioPanel<T>,
    regression: &'a RegressionSpec,
    options: &'a SolverOptions,
    problem: &'a RbsdeProblem<T>,
    y: Array2<T>,
    n: Array3<T>,
    a: Array2<T>,
    diag: Vec<NodeDiagnostics>,
    scale: T,
    value0_se: T,
}

impl<'a, T: Real> Sweep<'a, T> {
    fn new(
        problem: &'a RbsdeProblem<T>,
        panel: &'a ScenarioPanel<T>,
        regression: &'a RegressionSpec,
        options: &'a SolverOptions,
    ) -> Result<Self> {
        let paths = panel.paths();
        let steps = panel.grid().steps();
        let nodes = steps + 1;

        if problem.terminal.len() != paths {
            return Err(CoreError::invalid(format!(
                "terminal condition has {} entries for {paths} paths",
                problem.terminal.len()
            )));
        }
        if problem.noise_dim > panel.driver_count() {
            return Err(CoreError::invalid(format!(
                "noise_dim {} exceeds the panel's {} drivers",
                problem.noise_dim,
                panel.driver_count()
            )));
        }
        if let Some(flows) = &problem.flows {
            if flows.dim() != (paths, nodes) {
                return Err(CoreError::invalid("flow matrix shape mismatch"));
            }
        }
        if let Some(ab) = &problem.absorption {
            if ab.node.len() != paths || ab.value.len() != paths {
                return Err(CoreError::invalid("absorption vectors must match path count"));
            }
            for (p, node) in ab.node.iter().enumerate() {
                if let Some(k) = node {
                    if *k == 0 || *k > steps {
                        return Err(CoreError::invalid(format!(
                            "absorption node {k} on path {p} outside 1..={steps}"
                        )));
                    }
                }
            }
        }

        // Value scale for relative tolerances.
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
        if let Obstacle::Grid(grid) = &problem.obstacle {
            if grid.dim() != (paths, nodes) {
                return Err(CoreError::invalid("obstacle grid shape mismatch"));
            }
            // The terminal condition must dominate the terminal obstacle on
            // paths that reach maturity.
            let tol = T::of(1e-9) * scale;
            for p in 0..paths {
                let absorbed = problem
                    .absorption
                    .as_ref()
                    .is_some_and(|ab| ab.node[p].is_some());
                if !absorbed && problem.terminal[p] < grid[[p, steps]] - tol {
                    return Err(CoreError::invalid(format!(
                        "terminal condition below the obstacle at maturity on path {p}"
                    )));
                }
            }
        }

        // Terminal layer plus forced values on absorbed paths.
        let mut y = Array2::zeros((paths, nodes));
        for p in 0..paths {
            match problem.absorption.as_ref().and_then(|ab| ab.node[p]) {
                None => y[[p, steps]] = problem.terminal[p],
                Some(ka) => {
                    let value = problem.absorption.as_ref().unwrap().value[p];
                    y[[p, ka]] = value;
                }
            }
        }

        Ok(Sweep {
            panel,
            regression,
            options,
            problem,
            y,
            n: Array3::zeros((paths, steps, problem.noise_dim)),
            a: Array2::zeros((paths, nodes)),
            diag: Vec::with_capacity(steps),
            scale,
            value0_se: T::zero(),
        })
    }

    fn alive_rows(&self, k: usize) -> Vec<usize> {
        match &self.problem.absorption {
            None => (0..self.panel.paths()).collect(),
            Some(ab) => (0..self.panel.paths())
                .filter(|&p| ab.node[p].map_or(true, |ka| k < ka))
                .collect(),
        }
    }

    /// Regression target at node k for one alive path: next value plus the
    /// cashflow collected at the next node.
    #[inline]
    fn target(&self, p: usize, k: usize) -> T {
        let mut t = self.y[[p, k + 1]];
        if let Some(flows) = &self.problem.flows {
            t += flows[[p, k + 1]];
        }
        t
    }

    fn node_fit(&mut self, k: usize, rows: &[usize]) -> Result<NodeFit<T>> {
        let nd = self.problem.noise_dim;
        let dt = self.panel.grid().dt();
        let targets: Vec<T> = rows.par_iter().map(|&p| self.target(p, k)).collect();

        // The loadings are projections of the centered martingale increment
        // `(target - continuation) dW / dt`; centering removes the
        // continuation's contribution (conditionally mean-zero against dW)
        // so a conditionally deterministic target yields exactly zero.
        let noise_targets = |continuation: &[T]| -> Vec<Vec<T>> {
            (0..nd)
                .map(|d| {
                    rows.par_iter()
                        .enumerate()
                        .map(|(i, &p)| {
                            (targets[i] - continuation[i]) * self.panel.dw()[[p, k, d]] / dt
                        })
                        .collect()
                })
                .collect()
        };

        if k == 0 {
            // Degenerate state: the conditional expectation is the mean.
            let nf = T::of_usize(rows.len());
            let mean = det_sum(&targets) / nf;
            if rows.len() > 1 {
                let sq: Vec<T> = targets.iter().map(|&x| (x - mean) * (x - mean)).collect();
                self.value0_se = (det_sum(&sq) / (nf - T::one()) / nf).sqrt();
            }
            let continuation = vec![mean; rows.len()];
            let noise = noise_targets(&continuation);
            let mut loadings = vec![T::zero(); rows.len() * nd];
            for (d, nt) in noise.iter().enumerate() {
                let m = det_sum(nt) / nf;
                for i in 0..rows.len() {
                    loadings[i * nd + d] = m;
                }
            }
            return Ok(NodeFit {
                continuation,
                loadings,
                condition: 1.0,
                effective_rank: 1,
            });
        }

        let s0 = self.panel.spot()[[0, 0]];
        let spot_state: Vec<T> = rows
            .iter()
            .map(|&p| self.panel.spot()[[p, k]] / s0)
            .collect();
        let rate_state: Vec<T> = rows
            .iter()
            .map(|&p| self.panel.short_rate()[[p, k]])
            .collect();
        let obstacle_cols: Vec<Vec<T>> = match &self.problem.obstacle {
            Obstacle::Grid(grid) if self.options.obstacle_basis_powers > 0 => {
                (1..=self.options.obstacle_basis_powers)
                    .map(|pow| {
                        rows.iter()
                            .map(|&p| (grid[[p, k]] / self.scale).powi(pow as i32))
                            .collect()
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        let extra: Vec<&[T]> = obstacle_cols.iter().map(|c| c.as_slice()).collect();
        let design =
            DesignMatrix::build(self.regression, &spot_state, Some(&rate_state), &extra);

        let fit = design.fit(&[&targets], self.regression.sv_rel_threshold)?;
        let continuation = fit.fitted[0].clone();

        let mut loadings = vec![T::zero(); rows.len() * nd];
        if nd > 0 {
            let noise = noise_targets(&continuation);
            let refs: Vec<&[T]> = noise.iter().map(|t| t.as_slice()).collect();
            let noise_fit = design.fit(&refs, self.regression.sv_rel_threshold)?;
            for d in 0..nd {
                for i in 0..rows.len() {
                    loadings[i * nd + d] = noise_fit.fitted[d][i];
                }
            }
        }
        Ok(NodeFit {
            continuation,
            loadings,
            condition: fit.condition,
            effective_rank: fit.effective_rank,
        })
    }

    /// Pre-reflection values: generator term implicit in Y through
    /// fixed-point iterations seeded by the explicit predictor. When
    /// `cross` is supplied (comparison mode of the system solver), the
    /// generator's (y, n) arguments come from the other regime.
    fn pre_reflection(
        &self,
        k: usize,
        rows: &[usize],
        fit: &NodeFit<T>,
        cross: Option<&NodeFit<T>>,
    ) -> Vec<T> {
        let dt = self.panel.grid().dt();
        let nd = self.problem.noise_dim;
        rows.par_iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = fit.continuation[i];
                match cross {
                    Some(other) => {
                        let n = &other.loadings[i * nd..(i + 1) * nd];
                        c + dt * self.problem.generator.eval(
                            self.panel,
                            k,
                            p,
                            other.continuation[i],
                            n,
                        )
                    }
                    None => {
                        let n = &fit.loadings[i * nd..(i + 1) * nd];
                        let mut y = c + dt * self.problem.generator.eval(self.panel, k, p, c, n);
                        for _ in 0..self.options.generator_iterations {
                            y = c + dt * self.problem.generator.eval(self.panel, k, p, y, n);
                        }
                        y
                    }
                }
            })
            .collect()
    }

    /// Writes the node results and the per-node diagnostics entry.
    fn commit(
        &mut self,
        k: usize,
        rows: &[usize],
        fit: &NodeFit<T>,
        pre: &[T],
        reflected: &[T],
        obstacle: Option<&[T]>,
    ) {
        let nd = self.problem.noise_dim;
        let tie = T::of(self.options.tie_tol_rel) * self.scale;
        let comp_tol = T::of(self.options.complementarity_tol_rel) * self.scale;
        let mut mass = T::zero();
        let mut residual = T::zero();
        let mut binding = 0usize;
        for (i, &p) in rows.iter().enumerate() {
            let a = reflected[i] - pre[i];
            self.y[[p, k]] = reflected[i];
            self.a[[p, k]] = a;
            for d in 0..nd {
                self.n[[p, k, d]] = fit.loadings[i * nd + d];
            }
            mass += a;
            if a > tie {
                binding += 1;
            }
            if let Some(l) = obstacle {
                let slack = (reflected[i] - l[i] - comp_tol).pos();
                residual = residual.max(a * slack);
            }
        }
        self.diag.push(NodeDiagnostics {
            node: k,
            condition: fit.condition,
            effective_rank: fit.effective_rank,
            alive_paths: rows.len(),
            reflection_mass: mass.to_f64_lossy(),
            complementarity_residual: residual.to_f64_lossy(),
            binding_paths: binding,
        });
    }

    fn into_solution(mut self) -> RbsdeSolution<T> {
        self.diag.reverse();
        RbsdeSolution {
            y: self.y,
            n: self.n,
            a_increments: self.a,
            policy: None,
            diagnostics: SolverDiagnostics {
                value_scale: self.scale.to_f64_lossy(),
                nodes: self.diag,
            },
            value0_se: self.value0_se,
        }
    }
}

/// Solves one reflected BSDE with an explicit obstacle (or none).
pub fn solve_single_rbsde<T: Real>(
    problem: &RbsdeProblem<T>,
    panel: &ScenarioPanel<T>,
    regression: &RegressionSpec,
    options: &SolverOptions,
) -> Result<RbsdeSolution<T>> {
    if matches!(problem.obstacle, Obstacle::OtherRegimeMinusCost) {
        return Err(CoreError::invalid(
            "interconnected obstacles require solve_switching_system",
        ));
    }
    let mut sweep = Sweep::new(problem, panel, regression, options)?;
    let steps = panel.grid().steps();

    for k in (0..steps).rev() {
        let rows = sweep.alive_rows(k);
        if rows.is_empty() {
            continue;
        }
        let fit = sweep.node_fit(k, &rows)?;
        let pre = sweep.pre_reflection(k, &rows, &fit, None);
        let (reflected, obstacle_vals): (Vec<T>, Option<Vec<T>>) = match &problem.obstacle {
            Obstacle::None => (pre.clone(), None),
            Obstacle::Grid(grid) => {
                let l: Vec<T> = rows.iter().map(|&p| grid[[p, k]]).collect();
                let refl = pre
                    .iter()
                    .zip(&l)
                    .map(|(&y, &l)| y.max(l))
                    .collect();
                (refl, Some(l))
            }
            Obstacle::OtherRegimeMinusCost => unreachable!(),
        };
        sweep.commit(k, &rows, &fit, &pre, &reflected, obstacle_vals.as_deref());
    }

    Ok(sweep.into_solution())
}

/// Solves the two-regime system with interconnected obstacles
/// `L^z = Y^zeta - cost_into_zeta`, `L^zeta = Y^z - cost_into_z`.
///
/// The same-node reflection is applied simultaneously from the two
/// pre-reflection values and then iterated once more; with
/// `cost_into_z + cost_into_zeta > 0` at most one regime can bind per node,
/// so the second pass must be a fixed point — anything else is reported as
/// a numerical failure.
///
/// Returns the regime-z and regime-zeta solutions with optimal policies
/// attached (each policy starts from its own regime).
pub fn solve_switching_system<T: Real>(
    problem_z: &RbsdeProblem<T>,
    problem_zeta: &RbsdeProblem<T>,
    csa: &CsaSpec<T>,
    panel: &ScenarioPanel<T>,
    regression: &RegressionSpec,
    options: &SolverOptions,
) -> Result<(RbsdeSolution<T>, RbsdeSolution<T>)> {
    csa.validate()?;
    for (name, pb) in [("z", problem_z), ("zeta", problem_zeta)] {
        if !matches!(pb.obstacle, Obstacle::OtherRegimeMinusCost) {
            return Err(CoreError::invalid(format!(
                "regime-{name} problem must use the interconnected obstacle"
            )));
        }
    }

    let mut sweep_z = Sweep::new(problem_z, panel, regression, options)?;
    let mut sweep_zeta = Sweep::new(problem_zeta, panel, regression, options)?;
    let scale = sweep_z.scale.max(sweep_zeta.scale);
    sweep_z.scale = scale;
    sweep_zeta.scale = scale;

    let steps = panel.grid().steps();
    let conv_tol = T::of(1e-12) * scale;

    for k in (0..steps).rev() {
        let rows_z = sweep_z.alive_rows(k);
        let rows_zeta = sweep_zeta.alive_rows(k);

        let fit_z = if rows_z.is_empty() {
            None
        } else {
            Some(sweep_z.node_fit(k, &rows_z)?)
        };
        let fit_zeta = if rows_zeta.is_empty() {
            None
        } else {
            Some(sweep_zeta.node_fit(k, &rows_zeta)?)
        };

        let pre_z = fit_z.as_ref().map(|f| {
            let cross = if options.cross_generator_args {
                fit_zeta.as_ref()
            } else {
                None
            };
            sweep_z.pre_reflection(k, &rows_z, f, cross)
        });
        let pre_zeta = fit_zeta.as_ref().map(|f| {
            let cross = if options.cross_generator_args {
                fit_z.as_ref()
            } else {
                None
            };
            sweep_zeta.pre_reflection(k, &rows_zeta, f, cross)
        });

        // Interconnected reflection on paths alive in both regimes. Row
        // indices match when the problems share an absorption structure;
        // the general case intersects by path id.
        let mut y_z = pre_z.clone();
        let mut y_zeta = pre_zeta.clone();
        let mut obstacle_z: Option<Vec<T>> = None;
        let mut obstacle_zeta: Option<Vec<T>> = None;

        if let (Some(pz), Some(pzeta)) = (&pre_z, &pre_zeta) {
            let index_zeta: std::collections::HashMap<usize, usize> = rows_zeta
                .iter()
                .enumerate()
                .map(|(i, &p)| (p, i))
                .collect();

            // Obstacle of regime z switches into zeta (and vice versa); the
            // cost paid is the one of the regime being entered.
            let cost_for_z = csa.cost_to_zeta.finite();
            let cost_for_zeta = csa.cost_to_z.finite();

            let mut ob_z = vec![T::neg_infinity(); rows_z.len()];
            let mut ob_zeta = vec![T::neg_infinity(); rows_zeta.len()];
            let yz1 = y_z.as_mut().unwrap();
            let yzeta1 = y_zeta.as_mut().unwrap();

            // First pass: both reflections from the pre-reflection values.
            for (i, &p) in rows_z.iter().enumerate() {
                if let (Some(c), Some(&j)) = (cost_for_z, index_zeta.get(&p)) {
                    ob_z[i] = pzeta[j] - c;
                    yz1[i] = pz[i].max(ob_z[i]);
                }
            }
            for (j, &p) in rows_zeta.iter().enumerate() {
                if let Some(c) = cost_for_zeta {
                    if let Ok(i) = rows_z.binary_search(&p) {
                        ob_zeta[j] = pz[i] - c;
                        yzeta1[j] = pzeta[j].max(ob_zeta[j]);
                    }
                }
            }

            // Second pass from the updated same-node values; must already be
            // a fixed point when the round-trip cost is positive.
            let snapshot_z = yz1.clone();
            let snapshot_zeta = yzeta1.clone();
            let mut drift = T::zero();
            for (i, &p) in rows_z.iter().enumerate() {
                if let (Some(c), Some(&j)) = (cost_for_z, index_zeta.get(&p)) {
                    ob_z[i] = snapshot_zeta[j] - c;
                    let next = pz[i].max(ob_z[i]);
                    drift = drift.max((next - snapshot_z[i]).abs());
                    yz1[i] = next;
                }
            }
            for (j, &p) in rows_zeta.iter().enumerate() {
                if let Some(c) = cost_for_zeta {
                    if let Ok(i) = rows_z.binary_search(&p) {
                        ob_zeta[j] = snapshot_z[i] - c;
                        let next = pzeta[j].max(ob_zeta[j]);
                        drift = drift.max((next - snapshot_zeta[j]).abs());
                        yzeta1[j] = next;
                    }
                }
            }
            if drift > conv_tol {
                return Err(CoreError::numerical(format!(
                    "interconnected reflection did not stabilize at node {k} \
                     (drift {drift}, tolerance {conv_tol})"
                )));
            }
            if cost_for_z.is_some() {
                obstacle_z = Some(ob_z);
            }
            if cost_for_zeta.is_some() {
                obstacle_zeta = Some(ob_zeta);
            }
        }

        if let (Some(fit), Some(pre), Some(yv)) = (&fit_z, &pre_z, &y_z) {
            sweep_z.commit(k, &rows_z, fit, pre, yv, obstacle_z.as_deref());
        }
        if let (Some(fit), Some(pre), Some(yv)) = (&fit_zeta, &pre_zeta, &y_zeta) {
            sweep_zeta.commit(k, &rows_zeta, fit, pre, yv, obstacle_zeta.as_deref());
        }
    }

    let mut sol_z = sweep_z.into_solution();
    let mut sol_zeta = sweep_zeta.into_solution();
    sol_z.policy = Some(extract_policy(
        &sol_z, &sol_zeta, csa, panel, Regime::Z, options,
    ));
    sol_zeta.policy = Some(extract_policy(
        &sol_z, &sol_zeta, csa, panel, Regime::Zeta, options,
    ));
    Ok((sol_z, sol_zeta))
}
