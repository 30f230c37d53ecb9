//! Monte-Carlo verification of plans and controllers on the true model.
//!
//! Two kinds of experiment are supported. [`closed_loop`] replays one plan
//! under its disturbance-feedback policy `u_k = v_k + Σ_{j<k} Φᵘ_{k,j} ŵ_j`,
//! reconstructing each `ŵ_j` from the realized transition. [`run_mpc`]
//! re-plans at every step with a [`Controller`].

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::admm::AdmmState;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::models::{Constraints, Model};
use crate::scan::Executor;
use crate::sls::{self, RobustSettings, SlsDuals, SlsResponse, Tightening};
use crate::sqp::{self, Ocp, SqpSettings, Trajectory};

/// Realized constraint values up to this count as satisfied.
pub const SAFETY_TOL: f64 = 1e-3;
/// Slack for linearization error in the tube check.
pub const TUBE_TOL: f64 = 1e-2;
/// Singular values of `E` below this are treated as zero.
pub const PINV_TOL: f64 = 1e-10;
const W_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    /// Uniform in the unit ball.
    UniformBall,
    /// Uniform on the unit sphere.
    Boundary,
    /// Greedy push toward the most active constraint.
    Adversarial,
}

impl DisturbanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DisturbanceKind::UniformBall => "uniform_ball",
            DisturbanceKind::Boundary => "boundary",
            DisturbanceKind::Adversarial => "adversarial",
        }
    }
}

/// Seeded disturbance generator. Each rollout owns one.
#[derive(Clone, Debug)]
pub struct Disturbance {
    pub kind: DisturbanceKind,
    rng: ChaCha8Rng,
}

impl Disturbance {
    /// `stream` separates rollouts sharing a seed.
    pub fn new(kind: DisturbanceKind, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Disturbance { kind, rng }
    }

    /// Disturbance for the transition out of `(x, u)`.
    pub fn draw(&mut self, model: &dyn Model, constraints: &Constraints, x: &Vector, u: &Vector) -> Result<Vector> {
        let nw = model.disturbance(x).ncols();
        Ok(match self.kind {
            DisturbanceKind::UniformBall => sample_ball(&mut self.rng, nw),
            DisturbanceKind::Boundary => sample_sphere(&mut self.rng, nw),
            DisturbanceKind::Adversarial => adversarial(model, constraints, x, u)?,
        })
    }
}

/// Uniform on the unit sphere in `R^n`.
pub fn sample_sphere<R: Rng>(rng: &mut R, n: usize) -> Vector {
    loop {
        let v = Vector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Uniform in the unit ball in `R^n`.
pub fn sample_ball<R: Rng>(rng: &mut R, n: usize) -> Vector {
    let radius = rng.random::<f64>().powf(1.0 / n as f64);
    sample_sphere(rng, n) * radius
}

/// Unit `w` maximizing the growth of the most active state constraint.
///
/// Rows are ranked by their value at the predicted state `f(x, u)`. The
/// push is `Eᵀcᵀ` when that row sees the disturbance directly and
/// `(c Aˡ E)ᵀ` for the smallest lag `l ≤ 3` otherwise.
pub fn adversarial(model: &dyn Model, constraints: &Constraints, x: &Vector, u: &Vector) -> Result<Vector> {
    let e = model.disturbance(x);
    let (nu, nw) = (model.nu(), e.ncols());
    let pred = model.step(x, u)?;
    let (a, _) = model.jacobians(&pred, u)?;
    let g = constraints.stage(&pred, u);
    let (c, _) = constraints.stage_jacobians(&pred, nu);
    let mut map = e.clone();
    for _lag in 0..=3 {
        let push = &c * &map;
        let best = (0..g.len())
            .filter(|&i| push.row(i).norm() > 1e-12)
            .max_by(|&i, &j| g[i].total_cmp(&g[j]));
        if let Some(i) = best {
            let d = push.row(i).transpose();
            return Ok(&d / d.norm());
        }
        map = &a * map;
    }
    Ok(Vector::zeros(nw))
}

/// Minimum-norm `ŵ` with `E ŵ = Δ` on the range of `E`.
pub fn reconstruct(e: &Mat, delta: &Vector) -> Result<Vector> {
    let pinv = e.clone().pseudo_inverse(PINV_TOL).map_err(|m| Error::Model(m.to_string()))?;
    Ok(pinv * delta)
}

/// One replay of a plan under its disturbance-feedback policy.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    pub id: usize,
    pub kind: DisturbanceKind,
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    /// Reconstructed disturbances.
    pub w: Vec<Vector>,
    /// Per stage (terminal last): `min_i g(z,v)_i + h_i + tol - g(x,u)_i`.
    pub tube_margins: Vec<f64>,
    pub inside_tube: bool,
    /// Some reconstructed `‖ŵ‖` exceeded 1.
    pub disturbance_model_violated: bool,
    /// `min -g` over realized stages and the terminal state.
    pub min_margin: f64,
    pub max_w_norm: f64,
    pub safe: bool,
}

fn min_over(v: &Vector) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `-∞` for an empty vector.
fn max_entry(v: &Vector) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Simulates the true model from `plan.x[0]` under the policy implied by
/// `phi`, drawing disturbances from `source`.
pub fn closed_loop(
    ocp: &Ocp,
    plan: &Trajectory,
    phi: &SlsResponse,
    tightening: &Tightening,
    source: &mut Disturbance,
    id: usize,
) -> Result<RolloutRecord> {
    let model = ocp.model.as_ref();
    let n = ocp.horizon;
    plan.validate(model.nx(), model.nu(), n)?;
    if phi.horizon() != n || tightening.stage.len() != n {
        return Err(Error::Dimension("response and tightening must match the plan horizon".into()));
    }
    let mut x = vec![plan.x[0].clone()];
    let mut u = Vec::with_capacity(n);
    let mut w: Vec<Vector> = Vec::with_capacity(n);
    let mut tube_margins = Vec::with_capacity(n + 1);
    let mut min_margin = f64::INFINITY;
    for k in 0..n {
        let mut uk = plan.u[k].clone();
        for (j, wj) in w.iter().enumerate() {
            uk += phi.phi_u(k, j).expect("j < k < N") * wj;
        }
        let g = ocp.constraints.stage(&x[k], &uk);
        let tube = ocp.constraints.stage(&plan.x[k], &plan.u[k]) + &tightening.stage[k];
        tube_margins.push(min_over(&(tube.add_scalar(TUBE_TOL) - &g)));
        min_margin = min_margin.min(-max_entry(&g));
        let nominal_next = model.step(&x[k], &uk)?;
        let e = model.disturbance(&x[k]);
        let wk = source.draw(model, &ocp.constraints, &x[k], &uk)?;
        let next = &nominal_next + &e * wk;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { stage: k });
        }
        w.push(reconstruct(&e, &(&next - &nominal_next))?);
        u.push(uk);
        x.push(next);
    }
    let gf = ocp.constraints.terminal(&x[n]);
    if !gf.is_empty() {
        let tube = ocp.constraints.terminal(&plan.x[n]) + &tightening.terminal;
        tube_margins.push(min_over(&(tube.add_scalar(TUBE_TOL) - &gf)));
        min_margin = min_margin.min(-max_entry(&gf));
    } else {
        tube_margins.push(f64::INFINITY);
    }
    let max_w_norm = w.iter().map(|v| v.norm()).fold(0.0, f64::max);
    Ok(RolloutRecord {
        id,
        kind: source.kind,
        inside_tube: tube_margins.iter().all(|&m| m >= 0.0),
        disturbance_model_violated: max_w_norm > 1.0 + W_NORM_TOL,
        safe: min_margin >= -SAFETY_TOL,
        x,
        u,
        w,
        tube_margins,
        min_margin,
        max_w_norm,
    })
}

/// `max_k ‖x_k - z_k - Σ_{j<k} Φˣ_{k,j} ŵ_j‖_∞`; zero on LTV models.
pub fn superposition_error(record: &RolloutRecord, plan: &Trajectory, phi: &SlsResponse) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..record.x.len() {
        let mut predicted = plan.x[k].clone();
        for j in 0..k {
            predicted += phi.phi_x(k, j).expect("j < k") * &record.w[j];
        }
        worst = worst.max((&record.x[k] - predicted).amax());
    }
    worst
}

/// Counts per disturbance kind, in order.
pub type Mix = Vec<(DisturbanceKind, usize)>;

/// Rollout `i` gets the kind at position `i` of the expanded mix and stream `i`.
pub fn expand_mix(mix: &[(DisturbanceKind, usize)]) -> Vec<DisturbanceKind> {
    mix.iter().flat_map(|&(k, c)| std::iter::repeat_n(k, c)).collect()
}

/// Independent policy rollouts, one worker each.
pub fn run_rollouts(
    ocp: &Ocp,
    plan: &Trajectory,
    phi: &SlsResponse,
    tightening: &Tightening,
    mix: &[(DisturbanceKind, usize)],
    seed: u64,
    exec: &Executor,
) -> Result<Vec<RolloutRecord>> {
    let kinds = expand_mix(mix);
    exec.try_map(kinds.len(), |i| {
        let mut source = Disturbance::new(kinds[i], seed, i as u64);
        closed_loop(ocp, plan, phi, tightening, &mut source, i)
    })
}

pub fn safety_rate<'a>(safe: impl IntoIterator<Item = &'a bool>) -> f64 {
    let (mut ok, mut total) = (0usize, 0usize);
    for &s in safe {
        ok += s as usize;
        total += 1;
    }
    if total == 0 {
        1.0
    } else {
        ok as f64 / total as f64
    }
}

/// Output of one controller invocation.
#[derive(Clone, Debug)]
pub struct ControlStep {
    pub u: Vector,
    pub plan: Trajectory,
    pub tightening: Option<Tightening>,
    pub sqp_iters: usize,
    pub admm_iters: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    pub scan_layers: usize,
}

/// Receding-horizon feedback law.
pub trait Controller: Send + Sync {
    fn name(&self) -> &str;
    fn control(&mut self, x: &Vector, exec: &Executor) -> Result<ControlStep>;
    /// Copy of the controller including its warm-start state.
    fn fork(&self) -> Box<dyn Controller>;
}

/// Certainty-equivalent MPC: full SQP solves, or one RTI step per call.
#[derive(Clone, Debug)]
pub struct NominalMpc {
    pub ocp: Ocp,
    pub settings: SqpSettings,
    pub rti: bool,
    guess: Option<Trajectory>,
    duals: Option<AdmmState>,
}

impl NominalMpc {
    pub fn new(ocp: Ocp, settings: SqpSettings, rti: bool) -> Self {
        NominalMpc { ocp, settings, rti, guess: None, duals: None }
    }

    /// Seeds the first solve.
    pub fn with_guess(mut self, guess: Trajectory) -> Self {
        self.guess = Some(guess);
        self
    }
}

fn constant_guess(ocp: &Ocp, x: &Vector) -> Trajectory {
    Trajectory::constant(x, &ocp.cost.u_ref, ocp.horizon, ocp.model.dt())
}

impl Controller for NominalMpc {
    fn name(&self) -> &str {
        "nominal"
    }

    fn fork(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }

    fn control(&mut self, x: &Vector, exec: &Executor) -> Result<ControlStep> {
        if self.rti && self.guess.is_some() {
            let step = sqp::rti_step(&self.ocp, x, &self.settings, self.guess.as_ref(), self.duals.as_ref(), None, exec)?;
            self.guess = Some(step.next_guess);
            self.duals = Some(step.next_duals);
            return Ok(ControlStep {
                u: step.u0,
                plan: step.plan,
                tightening: None,
                sqp_iters: step.stats.iterations,
                admm_iters: step.stats.admm_iterations,
                kkt_residual: step.stats.kkt_residual,
                converged: step.stats.converged,
                scan_layers: step.stats.scan_layers,
            });
        }
        let guess = self.guess.clone().unwrap_or_else(|| constant_guess(&self.ocp, x));
        let out = sqp::solve_nmpc(&self.ocp, x, &self.settings, &guess, None, self.duals.as_ref(), exec)?;
        let qp = sqp::linearize(&self.ocp, &out.traj, None, exec)?;
        self.guess = Some(out.traj.shifted());
        self.duals = Some(sqp::shift_duals(&out.duals, &qp));
        Ok(ControlStep {
            u: out.traj.u[0].clone(),
            plan: out.traj,
            tightening: None,
            sqp_iters: out.stats.iterations,
            admm_iters: out.stats.admm_iterations,
            kkt_residual: out.stats.kkt_residual,
            converged: out.stats.converged,
            scan_layers: out.stats.scan_layers,
        })
    }
}

/// Tube MPC: the nominal plan is tightened by the synthesized response,
/// re-synthesized every call.
#[derive(Clone, Debug)]
pub struct RobustMpc {
    pub ocp: Ocp,
    pub settings: RobustSettings,
    pub rti: bool,
    guess: Option<Trajectory>,
    duals: Option<AdmmState>,
    tau: Option<SlsDuals>,
}

impl RobustMpc {
    pub fn new(ocp: Ocp, settings: RobustSettings, rti: bool) -> Self {
        RobustMpc { ocp, settings, rti, guess: None, duals: None, tau: None }
    }

    pub fn with_guess(mut self, guess: Trajectory) -> Self {
        self.guess = Some(guess);
        self
    }
}

impl Controller for RobustMpc {
    fn name(&self) -> &str {
        "robust"
    }

    fn fork(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }

    fn control(&mut self, x: &Vector, exec: &Executor) -> Result<ControlStep> {
        if self.rti && self.tau.is_some() {
            let prev = self.guess.as_ref().expect("set with tau");
            let step = sls::rti_robust_step(&self.ocp, x, &self.settings, prev, self.tau.as_ref(), self.duals.as_ref(), exec)?;
            self.guess = Some(step.next_guess);
            self.duals = Some(step.next_duals);
            self.tau = Some(step.next_tau);
            return Ok(ControlStep {
                u: step.u0,
                plan: step.plan,
                tightening: Some(step.tightening),
                sqp_iters: step.stats.iterations,
                admm_iters: step.stats.admm_iterations,
                kkt_residual: step.stats.kkt_residual,
                converged: step.stats.converged,
                scan_layers: step.stats.scan_layers,
            });
        }
        let guess = self.guess.clone().unwrap_or_else(|| constant_guess(&self.ocp, x));
        let out = sls::solve_robust_warm(&self.ocp, x, &self.settings, &guess, self.duals.as_ref(), exec)?;
        let qp = sqp::linearize(&self.ocp, &out.nominal.traj, None, exec)?;
        self.guess = Some(out.nominal.traj.shifted());
        self.duals = Some(sqp::shift_duals(&out.nominal.duals, &qp));
        self.tau = Some(out.tau.shifted());
        Ok(ControlStep {
            u: out.nominal.traj.u[0].clone(),
            plan: out.nominal.traj,
            tightening: Some(out.tightening),
            sqp_iters: out.stats.sqp_iterations,
            admm_iters: out.stats.admm_iterations,
            kkt_residual: out.nominal.stats.kkt_residual,
            converged: out.nominal.stats.converged && out.stats.converged,
            scan_layers: out.stats.scan_layers,
        })
    }
}

/// One receding-horizon step as reported to `results.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub solve_ms: f64,
    pub sqp_iters: usize,
    pub admm_iters: usize,
    pub kkt_residual: f64,
    /// `min -g` at the realized state and applied input.
    pub min_constraint_margin: f64,
    pub max_tube_h: f64,
    pub converged: bool,
    pub scan_layers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcRecord {
    pub id: usize,
    pub kind: DisturbanceKind,
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    pub w: Vec<Vector>,
    pub steps: Vec<StepRecord>,
    pub min_margin: f64,
    pub max_w_norm: f64,
    pub safe: bool,
}

/// Runs `steps` receding-horizon iterations on the true model under `source`.
#[allow(clippy::too_many_arguments)]
pub fn run_mpc(
    controller: &mut dyn Controller,
    model: &dyn Model,
    constraints: &Constraints,
    x0: &Vector,
    steps: usize,
    source: &mut Disturbance,
    id: usize,
    exec: &Executor,
) -> Result<MpcRecord> {
    simulate(controller, model, constraints, x0, steps, source, id, exec, None)
}

/// `first`, when given, is the already computed step-0 control at `x0`
/// together with its solve time.
#[allow(clippy::too_many_arguments)]
fn simulate(
    controller: &mut dyn Controller,
    model: &dyn Model,
    constraints: &Constraints,
    x0: &Vector,
    steps: usize,
    source: &mut Disturbance,
    id: usize,
    exec: &Executor,
    mut first: Option<(ControlStep, f64)>,
) -> Result<MpcRecord> {
    let mut x = vec![x0.clone()];
    let mut u = Vec::with_capacity(steps);
    let mut w = Vec::with_capacity(steps);
    let mut records = Vec::with_capacity(steps);
    let mut min_margin = f64::INFINITY;
    for t in 0..steps {
        let (ctl, solve_ms) = match first.take() {
            Some(done) => done,
            None => {
                let started = Instant::now();
                let ctl = controller.control(&x[t], exec)?;
                (ctl, started.elapsed().as_secs_f64() * 1e3)
            }
        };
        let g = constraints.stage(&x[t], &ctl.u);
        let margin = -max_entry(&g);
        min_margin = min_margin.min(margin);
        records.push(StepRecord {
            step: t,
            solve_ms,
            sqp_iters: ctl.sqp_iters,
            admm_iters: ctl.admm_iters,
            kkt_residual: ctl.kkt_residual,
            min_constraint_margin: margin,
            max_tube_h: ctl.tightening.as_ref().map_or(0.0, Tightening::max_entry),
            converged: ctl.converged,
            scan_layers: ctl.scan_layers,
        });
        let wt = source.draw(model, constraints, &x[t], &ctl.u)?;
        let next = model.step(&x[t], &ctl.u)? + model.disturbance(&x[t]) * &wt;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { stage: t });
        }
        w.push(wt);
        u.push(ctl.u);
        x.push(next);
    }
    let max_w_norm = w.iter().map(|v: &Vector| v.norm()).fold(0.0, f64::max);
    Ok(MpcRecord { id, kind: source.kind, x, u, w, steps: records, safe: min_margin >= -SAFETY_TOL, min_margin, max_w_norm })
}

/// Closed-loop campaign with one controller per rollout; fails on the first
/// rollout error.
#[allow(clippy::too_many_arguments)]
pub fn run_mpc_campaign<F>(
    make: F,
    model: &dyn Model,
    constraints: &Constraints,
    x0: &Vector,
    steps: usize,
    mix: &[(DisturbanceKind, usize)],
    seed: u64,
    exec: &Executor,
) -> Result<Vec<MpcRecord>>
where
    F: Fn() -> Box<dyn Controller> + Sync,
{
    try_mpc_campaign(make, model, constraints, x0, steps, mix, seed, exec).into_iter().collect()
}

/// Per-rollout outcomes of a closed-loop campaign. Every rollout starts from
/// `x0` with an identical controller, so the first solve is shared and each
/// rollout continues from a fork of the primed controller; the records equal
/// those of independent runs.
#[allow(clippy::too_many_arguments)]
pub fn try_mpc_campaign<F>(
    make: F,
    model: &dyn Model,
    constraints: &Constraints,
    x0: &Vector,
    steps: usize,
    mix: &[(DisturbanceKind, usize)],
    seed: u64,
    exec: &Executor,
) -> Vec<Result<MpcRecord>>
where
    F: Fn() -> Box<dyn Controller> + Sync,
{
    let kinds = expand_mix(mix);
    // Parallelism goes across rollouts; each solve runs sequentially.
    let inner = Executor::Sequential;
    let mut prototype = make();
    let first = if steps > 0 {
        let started = Instant::now();
        match prototype.control(x0, &inner) {
            Ok(ctl) => Some((ctl, started.elapsed().as_secs_f64() * 1e3)),
            Err(e) => return kinds.iter().map(|_| Err(e.clone())).collect(),
        }
    } else {
        None
    };
    exec.map(kinds.len(), |i| {
        let mut source = Disturbance::new(kinds[i], seed, i as u64);
        let mut ctl = prototype.fork();
        simulate(ctl.as_mut(), model, constraints, x0, steps, &mut source, i, &inner, first.clone())
    })
}
