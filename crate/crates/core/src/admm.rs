//! Inequality-constrained LTV-QPs by operator splitting.
//!
//! The constraints `Gξ ≤ f` are split off through a slack `z ∈ {z ≤ f}`.
//! Each iteration solves an equality-constrained LQR with augmented costs,
//! projects onto the slack set and takes a dual ascent step. The quadratic
//! part of the augmented costs depends only on `ρ`, so the LQR factorization
//! cache is reused until `ρ` changes.

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Vector};
use crate::lqr::{self, LqrCache, LqrSolution, LtvQp};
use crate::scan::Executor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmSettings {
    pub rho0: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    /// Penalty update period in iterations.
    pub sigma: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iter: usize,
    /// Reuse factorizations between penalty changes.
    pub use_cache: bool,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        AdmmSettings {
            rho0: 0.1,
            rho_min: 1e-6,
            rho_max: 1e6,
            sigma: 10,
            tol_primal: 1e-2,
            tol_dual: 1e-2,
            max_iter: 4000,
            use_cache: true,
        }
    }
}

impl AdmmSettings {
    /// Defaults with both tolerances set to `tol`.
    pub fn with_tol(tol: f64) -> Self {
        AdmmSettings { tol_primal: tol, tol_dual: tol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.rho0, self.rho_min, self.rho_max, self.tol_primal, self.tol_dual];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Settings("admm penalties and tolerances must be positive".into()));
        }
        if self.rho_min > self.rho_max || !(self.rho_min..=self.rho_max).contains(&self.rho0) {
            return Err(Error::Settings("rho0 must lie in [rho_min, rho_max]".into()));
        }
        if self.sigma < 2 {
            return Err(Error::Settings("sigma must be at least 2".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Settings("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Splitting state over the stacked constraint rows (stages, then terminal).
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmState {
    pub z: Vector,
    pub lambda: Vector,
    /// `λ / ρ`
    pub y: Vector,
    pub rho: f64,
    /// Incremented on every accepted penalty change.
    pub generation: u64,
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl AdmmState {
    /// Cold start: zero duals, `z = min(0, f)`.
    pub fn new(bounds: &Vector, rho: f64) -> Self {
        let m = bounds.len();
        AdmmState {
            z: bounds.map(|f| f.min(0.0)),
            lambda: Vector::zeros(m),
            y: Vector::zeros(m),
            rho,
            generation: 0,
            iteration: 0,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
        }
    }

    /// Warm start from a previous solve: duals and penalty carried over,
    /// slack re-projected onto the new bounds.
    pub fn warm(previous: &AdmmState, bounds: &Vector) -> Self {
        AdmmState {
            z: previous.z.zip_map(bounds, f64::min),
            lambda: previous.lambda.clone(),
            y: &previous.lambda / previous.rho,
            rho: previous.rho,
            generation: 0,
            iteration: 0,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
        }
    }
}

/// Adds the augmented-Lagrangian terms `ρ/2‖Gξ - z + y‖²` to the stage costs.
pub fn augment_costs(qp: &LtvQp, state: &AdmmState) -> LtvQp {
    let rho = state.rho;
    let mut out = qp.clone();
    for stage in out.stages.iter_mut() {
        if stage.nc() == 0 {
            continue;
        }
        let (ct, dt) = (stage.c.transpose(), stage.d.transpose());
        stage.q = symmetrize(&(&stage.q + &ct * &stage.c * rho));
        stage.r = symmetrize(&(&stage.r + &dt * &stage.d * rho));
        stage.s += &dt * &stage.c * rho;
    }
    let t = &mut out.terminal;
    if t.nf() > 0 {
        let ct = t.c.transpose();
        t.q = symmetrize(&(&t.q + &ct * &t.c * rho));
    }
    augment_linear(qp, state, &mut out);
    out
}

/// Rewrites only the linear terms of `out`, which must hold the quadratic
/// augmentation of `qp` at `state.rho`.
pub fn augment_linear(qp: &LtvQp, state: &AdmmState, out: &mut LtvQp) {
    let rho = state.rho;
    let offsets = qp.row_offsets();
    for (k, (stage, base)) in out.stages.iter_mut().zip(&qp.stages).enumerate() {
        let nc = base.nc();
        if nc == 0 {
            continue;
        }
        let shift = state.y.rows(offsets[k], nc) - state.z.rows(offsets[k], nc);
        stage.q_lin = &base.q_lin + base.c.tr_mul(&shift) * rho;
        stage.r_lin = &base.r_lin + base.d.tr_mul(&shift) * rho;
    }
    let nf = qp.terminal.nf();
    if nf > 0 {
        let shift = state.y.rows(offsets[qp.horizon()], nf) - state.z.rows(offsets[qp.horizon()], nf);
        out.terminal.q_lin = &qp.terminal.q_lin + qp.terminal.c.tr_mul(&shift) * rho;
    }
}

/// Slack projection and dual ascent; also records both residuals.
pub fn project_and_ascend(state: &mut AdmmState, g: &Vector, f: &Vector) {
    let rho = state.rho;
    let mut primal = 0.0f64;
    let mut dz = 0.0f64;
    for i in 0..g.len() {
        let z = (g[i] + state.y[i]).min(f[i]);
        let r = g[i] - z;
        state.lambda[i] += rho * r;
        state.y[i] = state.lambda[i] / rho;
        dz = dz.max((z - state.z[i]).abs());
        primal = primal.max(r.abs());
        state.z[i] = z;
    }
    state.primal_residual = primal;
    state.dual_residual = rho * dz;
}

/// Residual-balancing penalty update, applied only when the proposed
/// penalty differs from the current one by more than a factor of 5.
#[allow(clippy::manual_range_contains)]
pub fn update_rho(state: &mut AdmmState, settings: &AdmmSettings) -> bool {
    let (rp, rd) = (state.primal_residual, state.dual_residual);
    let proposed = if rp == 0.0 && rd == 0.0 {
        state.rho
    } else if rd == 0.0 {
        settings.rho_max
    } else {
        state.rho * (rp / rd).sqrt()
    };
    let proposed = proposed.clamp(settings.rho_min, settings.rho_max);
    let factor = proposed / state.rho;
    // Written out so a NaN factor keeps the current penalty.
    if !(factor > 5.0 || factor < 0.2) {
        return false;
    }
    state.rho = proposed;
    state.y = &state.lambda / proposed;
    state.generation += 1;
    true
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdmmStats {
    pub iterations: usize,
    pub converged: bool,
    pub rho_updates: usize,
    /// Full factorizations performed.
    pub factorizations: usize,
    /// Iterations served by the cached path.
    pub cached_solves: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Deepest scan executed by any inner LQR solve.
    pub scan_layers: usize,
}

#[derive(Clone, Debug)]
pub struct AdmmResult {
    pub solution: LqrSolution,
    pub state: AdmmState,
    pub stats: AdmmStats,
}

/// Solves the inequality-constrained QP. Without a warm start the splitting
/// begins from zero duals at `ρ₀`.
pub fn solve_qp(
    qp: &LtvQp,
    settings: &AdmmSettings,
    warm_start: Option<&AdmmState>,
    exec: &Executor,
) -> Result<AdmmResult> {
    settings.validate()?;
    qp.validate()?;
    let f = qp.bounds();
    let mut state = match warm_start {
        Some(prev) if prev.z.len() == f.len() => AdmmState::warm(prev, &f),
        _ => AdmmState::new(&f, settings.rho0),
    };
    let mut stats = AdmmStats::default();

    if f.is_empty() {
        let solution = lqr::solve(qp, exec)?;
        state.iteration = 1;
        state.primal_residual = 0.0;
        state.dual_residual = 0.0;
        stats = AdmmStats {
            iterations: 1,
            converged: true,
            factorizations: 1,
            scan_layers: solution.scan_layers(),
            ..stats
        };
        return Ok(AdmmResult { solution, state, stats });
    }

    let mut cache: Option<LqrCache> = None;
    let mut best: Option<(f64, LqrSolution, AdmmState)> = None;
    let mut augmented = augment_costs(qp, &state);
    let mut augmented_generation = state.generation;
    for t in 1..=settings.max_iter {
        if t > 1 {
            if augmented_generation == state.generation {
                augment_linear(qp, &state, &mut augmented);
            } else {
                augmented = augment_costs(qp, &state);
                augmented_generation = state.generation;
            }
        }
        let solution = match &cache {
            Some(c) if settings.use_cache && c.generation() == state.generation => {
                stats.cached_solves += 1;
                lqr::solve_cached(&augmented, c, state.generation, exec)?
            }
            _ => {
                stats.factorizations += 1;
                let (c, s) = lqr::build_cache(&augmented, state.generation, exec)?;
                cache = Some(c);
                s
            }
        };
        stats.scan_layers = stats.scan_layers.max(solution.scan_layers());
        let g = qp.constraint_values(&solution.dx, &solution.du);
        project_and_ascend(&mut state, &g, &f);
        state.iteration = t;
        stats.iterations = t;

        let score = (state.primal_residual / settings.tol_primal).max(state.dual_residual / settings.tol_dual);
        if score <= 1.0 {
            stats.converged = true;
            stats.primal_residual = state.primal_residual;
            stats.dual_residual = state.dual_residual;
            return Ok(AdmmResult { solution, state, stats });
        }
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, solution, state.clone()));
        }
        if t % settings.sigma == 0 && update_rho(&mut state, settings) {
            stats.rho_updates += 1;
        }
    }
    let (_, solution, best_state) = best.expect("max_iter is positive");
    stats.primal_residual = best_state.primal_residual;
    stats.dual_residual = best_state.dual_residual;
    Ok(AdmmResult { solution, state: best_state, stats })
}
