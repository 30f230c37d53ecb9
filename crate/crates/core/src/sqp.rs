//! Gauss-Newton SQP and real-time iteration around the ADMM QP solver.

use std::sync::Arc;

use crate::admm::{self, AdmmSettings, AdmmState};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, Mat, Vector};
use crate::lqr::{LtvQp, Stage, Terminal};
use crate::models::{Constraints, Model, TrackingCost};
use crate::scan::Executor;
use crate::sls::Tightening;

/// Finite-horizon optimal control problem.
#[derive(Clone, Debug)]
pub struct Ocp {
    pub model: Arc<dyn Model>,
    pub constraints: Constraints,
    pub cost: TrackingCost,
    pub horizon: usize,
}

impl Ocp {
    pub fn validate(&self) -> Result<()> {
        let (nx, nu) = (self.model.nx(), self.model.nu());
        if self.horizon == 0 {
            return Err(Error::Settings("horizon must be positive".into()));
        }
        self.constraints.validate(nx, nu)?;
        let c = &self.cost;
        if c.q.shape() != (nx, nx) || c.q_terminal.shape() != (nx, nx) || c.r.shape() != (nu, nu) {
            return Err(Error::Dimension("tracking weights do not match the model".into()));
        }
        if c.x_ref.len() != nx || c.u_ref.len() != nu {
            return Err(Error::Dimension("tracking reference does not match the model".into()));
        }
        Ok(())
    }

    pub fn objective(&self, traj: &Trajectory) -> f64 {
        let stage: f64 = traj.u.iter().zip(&traj.x).map(|(u, x)| self.cost.stage(x, u)).sum();
        stage + self.cost.terminal(traj.x.last().expect("trajectory has a terminal state"))
    }

    /// Largest violation of `g + h ≤ 0` over all stages and the terminal set.
    pub fn violation(&self, traj: &Trajectory, tightening: Option<&Tightening>) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..traj.horizon() {
            let g = self.constraints.stage(&traj.x[k], &traj.u[k]);
            for i in 0..g.len() {
                let h = tightening.map_or(0.0, |t| t.stage[k][i]);
                worst = worst.max(g[i] + h);
            }
        }
        let gf = self.constraints.terminal(traj.x.last().unwrap());
        for i in 0..gf.len() {
            worst = worst.max(gf[i] + tightening.map_or(0.0, |t| t.terminal[i]));
        }
        worst
    }

    /// `max_k ‖f(x_k, u_k) - x_{k+1}‖_∞`
    pub fn defect(&self, traj: &Trajectory) -> Result<f64> {
        let mut worst = 0.0f64;
        for k in 0..traj.horizon() {
            let next = self.model.step(&traj.x[k], &traj.u[k])?;
            worst = worst.max((next - &traj.x[k + 1]).amax());
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    pub dt: f64,
}

impl Trajectory {
    /// Every state `x0`, every input `u`.
    pub fn constant(x0: &Vector, u: &Vector, horizon: usize, dt: f64) -> Self {
        Trajectory { x: vec![x0.clone(); horizon + 1], u: vec![u.clone(); horizon], dt }
    }

    /// Simulates `model` from `x0` under `u`.
    pub fn rollout(model: &dyn Model, x0: &Vector, u: Vec<Vector>) -> Result<Self> {
        let mut x = Vec::with_capacity(u.len() + 1);
        x.push(x0.clone());
        for (k, uk) in u.iter().enumerate() {
            let next = model.step(&x[k], uk)?;
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { stage: k });
            }
            x.push(next);
        }
        Ok(Trajectory { x, u, dt: model.dt() })
    }

    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    /// Drops the first stage and duplicates the last one.
    pub fn shifted(&self) -> Self {
        let mut x: Vec<Vector> = self.x[1..].to_vec();
        x.push(self.x.last().unwrap().clone());
        let mut u: Vec<Vector> = self.u[1..].to_vec();
        u.push(self.u.last().unwrap().clone());
        Trajectory { x, u, dt: self.dt }
    }

    pub fn validate(&self, nx: usize, nu: usize, horizon: usize) -> Result<()> {
        if self.u.len() != horizon || self.x.len() != horizon + 1 {
            return Err(Error::Dimension(format!(
                "trajectory has {} states and {} inputs for horizon {horizon}",
                self.x.len(),
                self.u.len()
            )));
        }
        if self.x.iter().any(|x| x.len() != nx) || self.u.iter().any(|u| u.len() != nu) {
            return Err(Error::Dimension("trajectory entries do not match the model".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepPolicy {
    /// `α = 1`
    Full,
    /// Backtracking on an ℓ₁ merit function.
    Merit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SqpSettings {
    pub max_iters: usize,
    pub kkt_tol: f64,
    pub step: StepPolicy,
    pub admm: AdmmSettings,
}

impl Default for SqpSettings {
    fn default() -> Self {
        SqpSettings { max_iters: 30, kkt_tol: 1e-2, step: StepPolicy::Merit, admm: AdmmSettings::with_tol(1e-4) }
    }
}

impl SqpSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.kkt_tol > 0.0) {
            return Err(Error::Settings("max_iters and kkt_tol must be positive".into()));
        }
        self.admm.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SqpStats {
    /// Steps applied to the iterate.
    pub iterations: usize,
    pub qp_solves: usize,
    pub converged: bool,
    pub admm_iterations: usize,
    /// Every inner QP solve converged.
    pub admm_converged: bool,
    /// Final `max(step, defect, violation)`.
    pub kkt_residual: f64,
    pub step_norm: f64,
    pub defect: f64,
    pub violation: f64,
    pub scan_layers: usize,
}

#[derive(Clone, Debug)]
pub struct SqpResult {
    pub traj: Trajectory,
    /// Splitting state of the last QP; `lambda` holds the stacked multipliers.
    pub duals: AdmmState,
    pub stats: SqpStats,
}

/// Gauss-Newton LTV-QP around `traj`. The tightening, when given, shifts the
/// constraint right-hand sides to `-g - h`.
pub fn linearize(ocp: &Ocp, traj: &Trajectory, tightening: Option<&Tightening>, exec: &Executor) -> Result<LtvQp> {
    let model = ocp.model.as_ref();
    let (nx, nu) = (model.nx(), model.nu());
    traj.validate(nx, nu, ocp.horizon)?;
    let cost = &ocp.cost;
    let stages = exec.try_map(ocp.horizon, |k| {
        let (x, u) = (&traj.x[k], &traj.u[k]);
        let next = model.step(x, u)?;
        let (a, b) = model.jacobians(x, u)?;
        let (c, d) = ocp.constraints.stage_jacobians(x, nu);
        let mut g = ocp.constraints.stage(x, u);
        if let Some(t) = tightening {
            g += &t.stage[k];
        }
        let defect = next - &traj.x[k + 1];
        let finite = all_finite(&a) && all_finite(&b) && defect.iter().all(|v| v.is_finite());
        if !finite || !all_finite(&c) || !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { stage: k });
        }
        Ok(Stage {
            a,
            b,
            defect,
            q: cost.q.clone(),
            r: cost.r.clone(),
            s: Mat::zeros(nu, nx),
            q_lin: &cost.q * (x - &cost.x_ref),
            r_lin: &cost.r * (u - &cost.u_ref),
            c,
            d,
            bound: -g,
        })
    })?;
    let xn = traj.x.last().unwrap();
    let mut gf = ocp.constraints.terminal(xn);
    if let Some(t) = tightening {
        gf += &t.terminal;
    }
    let cf = ocp.constraints.terminal_jacobian(xn);
    if !all_finite(&cf) || !gf.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { stage: ocp.horizon });
    }
    let terminal = Terminal { q: cost.q_terminal.clone(), q_lin: &cost.q_terminal * (xn - &cost.x_ref), c: cf, bound: -gf };
    Ok(LtvQp { stages, terminal, dx0: Vector::zeros(nx) })
}

fn merit(ocp: &Ocp, traj: &Trajectory, tightening: Option<&Tightening>, weight: f64) -> Result<f64> {
    let mut infeas = 0.0;
    for k in 0..traj.horizon() {
        let next = ocp.model.step(&traj.x[k], &traj.u[k])?;
        infeas += (next - &traj.x[k + 1]).abs().sum();
        let g = ocp.constraints.stage(&traj.x[k], &traj.u[k]);
        for i in 0..g.len() {
            infeas += (g[i] + tightening.map_or(0.0, |t| t.stage[k][i])).max(0.0);
        }
    }
    let gf = ocp.constraints.terminal(traj.x.last().unwrap());
    for i in 0..gf.len() {
        infeas += (gf[i] + tightening.map_or(0.0, |t| t.terminal[i])).max(0.0);
    }
    let value = ocp.objective(traj) + weight * infeas;
    Ok(if value.is_finite() { value } else { f64::INFINITY })
}

fn apply_step(traj: &Trajectory, dx: &[Vector], du: &[Vector], alpha: f64) -> Trajectory {
    Trajectory {
        x: traj.x.iter().zip(dx).map(|(x, d)| x + d * alpha).collect(),
        u: traj.u.iter().zip(du).map(|(u, d)| u + d * alpha).collect(),
        dt: traj.dt,
    }
}

fn step_norm(dx: &[Vector], du: &[Vector]) -> f64 {
    dx.iter().chain(du).fold(0.0f64, |m, v| m.max(v.amax()))
}

/// Tightest inner tolerance used when refining a non-descent QP step.
const MIN_ADMM_TOL: f64 = 1e-6;

/// Iterates linearize → QP → step until the step, the dynamics defect and
/// the constraint violation are all within `kkt_tol`.
pub fn solve_nmpc(
    ocp: &Ocp,
    x0: &Vector,
    settings: &SqpSettings,
    guess: &Trajectory,
    tightening: Option<&Tightening>,
    warm: Option<&AdmmState>,
    exec: &Executor,
) -> Result<SqpResult> {
    ocp.validate()?;
    settings.validate()?;
    guess.validate(ocp.model.nx(), ocp.model.nu(), ocp.horizon)?;
    if x0.len() != ocp.model.nx() {
        return Err(Error::Dimension("initial state does not match the model".into()));
    }
    let mut traj = guess.clone();
    traj.x[0] = x0.clone();
    let mut duals = warm.cloned();
    let mut stats = SqpStats { admm_converged: true, ..SqpStats::default() };
    let mut increases = 0usize;

    for _ in 0..settings.max_iters {
        let qp = linearize(ocp, &traj, tightening, exec)?;
        let objective = ocp.objective(&traj);
        let mut admm_settings = settings.admm.clone();
        let mut warm_qp = duals.clone();
        // An inexact QP step can fail to be a descent direction for the
        // merit; re-solve it more tightly until it is one.
        let (out, weight, phi0, slope) = loop {
            let out = admm::solve_qp(&qp, &admm_settings, warm_qp.as_ref(), exec)?;
            stats.qp_solves += 1;
            stats.admm_iterations += out.stats.iterations;
            stats.scan_layers = stats.scan_layers.max(out.stats.scan_layers);
            let (dx, du) = (&out.solution.dx, &out.solution.du);
            // The penalty must dominate both inequality and dynamics
            // multipliers; the latter are the cost-to-go gradients.
            let lam = out.state.lambda.amax();
            let costate = (1..=ocp.horizon)
                .map(|k| (&out.solution.p[k] * &dx[k] + &out.solution.p_lin[k]).amax())
                .fold(0.0f64, f64::max);
            let weight = (10.0 * lam.max(costate)).max(1.0);
            let phi0 = merit(ocp, &traj, tightening, weight)?;
            let residual = qp.constraint_values(dx, du) - qp.bounds();
            let predicted = residual.iter().map(|v| v.max(0.0)).sum::<f64>();
            let mut slope: f64 = qp.stages.iter().enumerate().map(|(k, s)| s.q_lin.dot(&dx[k]) + s.r_lin.dot(&du[k])).sum();
            slope += qp.terminal.q_lin.dot(&dx[ocp.horizon]);
            slope += weight * predicted - (phi0 - objective);
            let tight = admm_settings.tol_primal <= MIN_ADMM_TOL;
            if settings.step == StepPolicy::Full || slope < 0.0 || tight {
                break (out, weight, phi0, slope);
            }
            admm_settings.tol_primal = (admm_settings.tol_primal * 0.1).max(MIN_ADMM_TOL);
            admm_settings.tol_dual = (admm_settings.tol_dual * 0.1).max(MIN_ADMM_TOL);
            warm_qp = Some(out.state);
        };
        stats.admm_converged &= out.stats.converged;
        let (dx, du) = (&out.solution.dx, &out.solution.du);

        stats.step_norm = step_norm(dx, du);
        stats.defect = qp.stages.iter().fold(0.0f64, |m, s| m.max(s.defect.amax()));
        stats.violation = ocp.violation(&traj, tightening).max(0.0);
        stats.kkt_residual = stats.step_norm.max(stats.defect).max(stats.violation);
        duals = Some(out.state.clone());
        if stats.kkt_residual <= settings.kkt_tol {
            stats.converged = true;
            break;
        }

        let alpha = match settings.step {
            StepPolicy::Full => 1.0,
            StepPolicy::Merit => {
                let mut alpha = 1.0;
                for _ in 0..10 {
                    let trial = merit(ocp, &apply_step(&traj, dx, du, alpha), tightening, weight)?;
                    if trial <= phi0 + 1e-4 * alpha * slope.min(0.0) {
                        break;
                    }
                    alpha *= 0.5;
                }
                alpha
            }
        };
        traj = apply_step(&traj, dx, du, alpha);
        traj.x[0] = x0.clone();
        stats.iterations += 1;

        // Increases at rounding level are stalls, not divergence.
        if merit(ocp, &traj, tightening, weight)? > phi0 + 1e-9 * phi0.abs().max(1.0) {
            increases += 1;
            if increases >= 5 {
                return Err(Error::Diverged { steps: increases });
            }
        } else {
            increases = 0;
        }
    }
    let duals = duals.expect("at least one QP is solved");
    Ok(SqpResult { traj, duals, stats })
}

/// Shifts the stacked splitting state by one stage, duplicating the last.
pub fn shift_duals(state: &AdmmState, qp: &LtvQp) -> AdmmState {
    let offsets = qp.row_offsets();
    let n = qp.horizon();
    let shift = |v: &Vector| {
        let mut out = v.clone();
        for k in 0..n {
            let src = (k + 1).min(n - 1);
            let rows = qp.stages[k].nc();
            if qp.stages[src].nc() == rows {
                out.rows_mut(offsets[k], rows).copy_from(&v.rows(offsets[src], rows));
            }
        }
        out
    };
    AdmmState {
        z: shift(&state.z),
        lambda: shift(&state.lambda),
        y: shift(&state.y),
        generation: 0,
        iteration: 0,
        ..state.clone()
    }
}

#[derive(Clone, Debug)]
pub struct RtiStep {
    /// First input of the updated plan.
    pub u0: Vector,
    /// Updated plan before shifting.
    pub plan: Trajectory,
    /// Plan shifted one stage for the next call.
    pub next_guess: Trajectory,
    /// Splitting state shifted alongside `next_guess`.
    pub next_duals: AdmmState,
    pub stats: SqpStats,
}

/// One linearization, one QP and a full step. Without a previous plan the
/// first call falls back to a full solve from a constant guess.
pub fn rti_step(
    ocp: &Ocp,
    x0: &Vector,
    settings: &SqpSettings,
    previous: Option<&Trajectory>,
    warm: Option<&AdmmState>,
    tightening: Option<&Tightening>,
    exec: &Executor,
) -> Result<RtiStep> {
    let Some(prev) = previous else {
        let guess = Trajectory::constant(x0, &ocp.cost.u_ref, ocp.horizon, ocp.model.dt());
        let full = solve_nmpc(ocp, x0, settings, &guess, tightening, warm, exec)?;
        let qp = linearize(ocp, &full.traj, tightening, exec)?;
        return Ok(RtiStep {
            u0: full.traj.u[0].clone(),
            next_guess: full.traj.shifted(),
            next_duals: shift_duals(&full.duals, &qp),
            plan: full.traj,
            stats: full.stats,
        });
    };
    let single = SqpSettings { max_iters: 1, step: StepPolicy::Full, ..settings.clone() };
    single.validate()?;
    let mut traj = prev.clone();
    traj.x[0] = x0.clone();
    let qp = linearize(ocp, &traj, tightening, exec)?;
    let out = admm::solve_qp(&qp, &single.admm, warm, exec)?;
    let (dx, du) = (&out.solution.dx, &out.solution.du);
    let mut plan = apply_step(&traj, dx, du, 1.0);
    plan.x[0] = x0.clone();
    let step = step_norm(dx, du);
    let defect = qp.stages.iter().fold(0.0f64, |m, s| m.max(s.defect.amax()));
    let violation = ocp.violation(&traj, tightening).max(0.0);
    let stats = SqpStats {
        iterations: 1,
        qp_solves: 1,
        converged: step.max(defect).max(violation) <= settings.kkt_tol,
        admm_iterations: out.stats.iterations,
        admm_converged: out.stats.converged,
        kkt_residual: step.max(defect).max(violation),
        step_norm: step,
        defect,
        violation,
        scan_layers: out.stats.scan_layers,
    };
    Ok(RtiStep {
        u0: plan.u[0].clone(),
        next_guess: plan.shifted(),
        next_duals: shift_duals(&out.state, &qp),
        plan,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr;
    use crate::models::{Dubins, Linear, Obstacle, Pendulum};

    fn linear_ocp(n: usize) -> Ocp {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = Mat::from_column_slice(2, 1, &[0.005, 0.1]);
        let model = Linear { a, b, e: Mat::identity(2, 2) * 0.01, dt: 0.1 };
        Ocp {
            model: Arc::new(model),
            constraints: Constraints::default(),
            cost: TrackingCost::diagonal(&[1.0, 0.5], &[0.1], &[5.0, 5.0], Vector::zeros(2), Vector::zeros(1)),
            horizon: n,
        }
    }

    #[test]
    fn dubins_linearization_row() {
        let ocp = Ocp {
            model: Arc::new(Dubins::new(1.0, 0.1)),
            constraints: Constraints::default(),
            cost: TrackingCost::diagonal(&[1.0; 3], &[1.0], &[1.0; 3], Vector::zeros(3), Vector::zeros(1)),
            horizon: 3,
        };
        let traj = Trajectory::constant(&Vector::zeros(3), &Vector::zeros(1), 3, 0.1);
        let qp = linearize(&ocp, &traj, None, &Executor::Sequential).unwrap();
        assert_eq!(qp.stages[0].a.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn untightened_bounds_are_negated_constraints() {
        let cons = Constraints::default().with_obstacles(vec![Obstacle { cx: 0.5, cy: 0.0, r: 0.2 }], (0, 1));
        let ocp = Ocp {
            model: Arc::new(Dubins::new(1.0, 0.1)),
            constraints: cons.clone(),
            cost: TrackingCost::diagonal(&[1.0; 3], &[1.0], &[1.0; 3], Vector::zeros(3), Vector::zeros(1)),
            horizon: 2,
        };
        let traj = Trajectory::rollout(ocp.model.as_ref(), &Vector::zeros(3), vec![Vector::zeros(1); 2]).unwrap();
        let qp = linearize(&ocp, &traj, None, &Executor::Sequential).unwrap();
        for k in 0..2 {
            assert_eq!(qp.stages[k].bound, -cons.stage(&traj.x[k], &traj.u[k]));
        }
    }

    #[test]
    fn lq_problem_takes_a_single_step() {
        let ocp = linear_ocp(20);
        let x0 = Vector::from_vec(vec![1.0, -0.5]);
        let guess = Trajectory::constant(&x0, &Vector::zeros(1), 20, 0.1);
        let settings = SqpSettings { kkt_tol: 1e-8, step: StepPolicy::Full, ..SqpSettings::default() };
        let out = solve_nmpc(&ocp, &x0, &settings, &guess, None, None, &Executor::Sequential).unwrap();
        assert!(out.stats.converged);
        assert_eq!(out.stats.iterations, 1);
        // Same problem posed directly as an LQR in absolute coordinates.
        let qp = linearize(&ocp, &Trajectory::constant(&Vector::zeros(2), &Vector::zeros(1), 20, 0.1), None, &Executor::Sequential).unwrap();
        let mut qp = qp;
        qp.dx0 = x0.clone();
        let direct = lqr::solve(&qp, &Executor::Sequential).unwrap();
        for k in 0..20 {
            assert!((&out.traj.u[k] - &direct.du[k]).amax() <= 1e-9);
        }
    }

    #[test]
    fn x0_is_kept_exactly() {
        let ocp = linear_ocp(10);
        let x0 = Vector::from_vec(vec![0.3, 0.1]);
        let guess = Trajectory::constant(&Vector::zeros(2), &Vector::zeros(1), 10, 0.1);
        let out = solve_nmpc(&ocp, &x0, &SqpSettings::default(), &guess, None, None, &Executor::Sequential).unwrap();
        assert_eq!(out.traj.x[0], x0);
    }

    #[test]
    fn pendulum_stabilization_respects_torque_bounds() {
        let p = Pendulum::new(2, 0.01).unwrap();
        let n = 50;
        let umax = 20.0;
        let ocp = Ocp {
            constraints: Constraints::input_box(Vector::from_element(2, -umax), Vector::from_element(2, umax)),
            cost: TrackingCost::diagonal(&[10.0, 10.0, 1.0, 1.0], &[0.01, 0.01], &[100.0, 100.0, 10.0, 10.0], p.upright(), Vector::zeros(2)),
            model: Arc::new(p.clone()),
            horizon: n,
        };
        let mut x0 = p.upright();
        x0[0] += 0.1;
        x0[1] -= 0.1;
        let guess = Trajectory::constant(&x0, &Vector::zeros(2), n, 0.01);
        let out = solve_nmpc(&ocp, &x0, &SqpSettings::default(), &guess, None, None, &Executor::Sequential).unwrap();
        assert!(out.stats.converged, "{:?}", out.stats);
        assert!(out.traj.u.iter().all(|u| u.amax() <= umax + 1e-2));
        assert!(ocp.defect(&out.traj).unwrap() <= 1e-1);
    }

    #[test]
    fn shifting_duplicates_the_last_stage() {
        let traj = Trajectory {
            x: (0..4).map(|i| Vector::from_element(1, i as f64)).collect(),
            u: (0..3).map(|i| Vector::from_element(1, 10.0 + i as f64)).collect(),
            dt: 0.1,
        };
        let s = traj.shifted();
        assert_eq!(s.x.iter().map(|v| v[0]).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 3.0]);
        assert_eq!(s.u.iter().map(|v| v[0]).collect::<Vec<_>>(), vec![11.0, 12.0, 12.0]);
    }
}
