//! Scenario files, campaign runner and artifact writers behind the
//! `robust-mpc` binary.
//!
//! A scenario is one JSON document (`schema: 1`, unknown keys rejected).
//! `run` executes its campaign in the scenario's mode; `compare` executes it
//! in both modes on identical seeded disturbances. Artifacts are written by a
//! single writer after the campaign finishes, including the part of a
//! campaign that completed before a solver failure.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{self, AdmmSettings};
use crate::error::Error;
use crate::fixtures::{normal_mat, random_ltv_qp};
use crate::linalg::{Mat, Vector};
use crate::lqr;
use crate::models::{Constraints, ModelSpec, Obstacle, TrackingCost};
use crate::reference;
use crate::rollout::{
    run_rollouts, try_mpc_campaign, Controller, DisturbanceKind, Mix, MpcRecord, NominalMpc, RobustMpc,
    RolloutRecord, StepRecord,
};
use crate::scan::{scan_depth, Executor};
use crate::sls::{self, solve_robust, RobustSettings, SlsDuals, SlsResponse, SlsWeights, Tightening};
use crate::sqp::{self, Ocp, SqpSettings, StepPolicy, Trajectory};

pub const SCHEMA_VERSION: u32 = 1;
/// Leading steps of every closed-loop run left out of the timing aggregates.
pub const WARMUP_STEPS: usize = 10;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelSpec,
    pub horizon: usize,
    pub x0: Vec<f64>,
    pub cost: CostSpec,
    #[serde(default)]
    pub constraints: ConstraintSpec,
    #[serde(default)]
    pub mode: Mode,
    pub campaign: CampaignSpec,
    #[serde(default)]
    pub disturbance: DisturbanceSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Diagonal tracking weights. References default to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub q_terminal: Vec<f64>,
    #[serde(default)]
    pub x_ref: Option<Vec<f64>>,
    #[serde(default)]
    pub u_ref: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    #[serde(default)]
    pub u_min: Option<Vec<f64>>,
    #[serde(default)]
    pub u_max: Option<Vec<f64>>,
    #[serde(default)]
    pub x_min: Option<Vec<f64>>,
    #[serde(default)]
    pub x_max: Option<Vec<f64>>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    /// State indices of the planar position; defaults to the model's.
    #[serde(default)]
    pub position: Option<[usize; 2]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Robust,
    Nominal,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Robust => "robust",
            Mode::Nominal => "nominal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CampaignSpec {
    /// One solve at `x0`, then every rollout replays the plan under its
    /// disturbance-feedback policy (zero feedback in nominal mode).
    Rollouts,
    /// Receding-horizon closed loops, one per rollout.
    Mpc { steps: usize },
    /// Closed loops repeated for each horizon.
    Sweep { horizons: Vec<usize>, steps: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mix: MixSpec,
}

/// Rollout counts per disturbance kind, expanded in field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    #[serde(default)]
    pub uniform_ball: usize,
    #[serde(default)]
    pub boundary: usize,
    #[serde(default)]
    pub adversarial: usize,
}

impl Default for MixSpec {
    fn default() -> Self {
        MixSpec { uniform_ball: 1, boundary: 0, adversarial: 0 }
    }
}

impl MixSpec {
    pub fn mix(&self) -> Mix {
        vec![
            (DisturbanceKind::UniformBall, self.uniform_ball),
            (DisturbanceKind::Boundary, self.boundary),
            (DisturbanceKind::Adversarial, self.adversarial),
        ]
    }

    pub fn total(&self) -> usize {
        self.uniform_ball + self.boundary + self.adversarial
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default)]
    pub sqp: SqpSpec,
    #[serde(default)]
    pub admm: AdmmSpec,
    #[serde(default)]
    pub sls: SlsSpec,
    /// One SQP iteration per closed-loop step after the first.
    #[serde(default)]
    pub rti: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSpec {
    Merit,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqpSpec {
    pub max_iters: usize,
    pub kkt_tol: f64,
    pub step: StepSpec,
}

impl Default for SqpSpec {
    fn default() -> Self {
        let d = SqpSettings::default();
        SqpSpec { max_iters: d.max_iters, kkt_tol: d.kkt_tol, step: StepSpec::Merit }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmSpec {
    pub rho0: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub sigma: usize,
    /// Primal and dual tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub use_cache: bool,
}

impl Default for AdmmSpec {
    fn default() -> Self {
        let d = SqpSettings::default().admm;
        AdmmSpec {
            rho0: d.rho0,
            rho_min: d.rho_min,
            rho_max: d.rho_max,
            sigma: d.sigma,
            tol: d.tol_primal,
            max_iter: d.max_iter,
            use_cache: d.use_cache,
        }
    }
}

/// Synthesis weights are `scale · diag(...)`, identity diagonals by default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlsSpec {
    pub scale: f64,
    pub q: Option<Vec<f64>>,
    pub r: Option<Vec<f64>>,
    pub q_terminal: Option<Vec<f64>>,
    pub tol_h: f64,
    pub max_alternations: usize,
    pub infeasible_patience: usize,
}

impl Default for SlsSpec {
    fn default() -> Self {
        let d = RobustSettings::new(SqpSettings::default(), SlsWeights::identity(1, 1));
        SlsSpec {
            scale: 1.0,
            q: None,
            r: None,
            q_terminal: None,
            tol_h: d.tol_h,
            max_alternations: d.max_alternations,
            infeasible_patience: d.infeasible_patience,
        }
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Solver(_) => EXIT_SOLVER,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn config(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("field `{field}`: {msg}"))
}

fn io_failure(path: &Path, e: io::Error) -> CliError {
    CliError::Solver(format!("writing {}: {e}", path.display()))
}

/// Reads and parses a scenario; parse errors carry line and column.
pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_scenario(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_scenario(text: &str) -> Result<Scenario, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

/// A validated scenario, ready to run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub ocp: Ocp,
    pub x0: Vector,
    pub mix: Mix,
    pub seed: u64,
    pub mode: Mode,
    pub campaign: CampaignSpec,
    pub sqp: SqpSettings,
    pub robust: RobustSettings,
    pub rti: bool,
}

fn vector(field: &str, v: &[f64], len: usize) -> Result<Vector, CliError> {
    if v.len() != len {
        return Err(config(field, format!("expected {len} entries, found {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(config(field, "entries must be finite"));
    }
    Ok(Vector::from_column_slice(v))
}

fn nonnegative_diag(field: &str, v: &[f64], len: usize) -> Result<Vec<f64>, CliError> {
    let out = vector(field, v, len)?;
    if out.iter().any(|x| *x < 0.0) {
        return Err(config(field, "weights must be non-negative"));
    }
    Ok(out.as_slice().to_vec())
}

/// Checks the scenario against the model dimensions and builds the problem.
pub fn prepare(s: &Scenario) -> Result<Prepared, CliError> {
    if s.schema != SCHEMA_VERSION {
        return Err(config("schema", format!("unsupported version {} (expected {SCHEMA_VERSION})", s.schema)));
    }
    let model = s.model.build().map_err(|e| config("model", e))?;
    let (nx, nu) = (model.nx(), model.nu());
    if s.horizon == 0 {
        return Err(config("horizon", "must be positive"));
    }
    let x0 = vector("x0", &s.x0, nx)?;

    let c = &s.cost;
    let q = nonnegative_diag("cost.q", &c.q, nx)?;
    let r = nonnegative_diag("cost.r", &c.r, nu)?;
    if r.iter().any(|v| *v <= 0.0) {
        return Err(config("cost.r", "input weights must be positive"));
    }
    let qf = nonnegative_diag("cost.q_terminal", &c.q_terminal, nx)?;
    let x_ref = match &c.x_ref {
        Some(v) => vector("cost.x_ref", v, nx)?,
        None => Vector::zeros(nx),
    };
    let u_ref = match &c.u_ref {
        Some(v) => vector("cost.u_ref", v, nu)?,
        None => Vector::zeros(nu),
    };
    let cost = TrackingCost::diagonal(&q, &r, &qf, x_ref, u_ref);

    let k = &s.constraints;
    let bound = |field: &str, v: &Option<Vec<f64>>, len| v.as_ref().map(|v| vector(field, v, len)).transpose();
    let mut constraints = Constraints {
        u_min: bound("constraints.u_min", &k.u_min, nu)?,
        u_max: bound("constraints.u_max", &k.u_max, nu)?,
        x_min: bound("constraints.x_min", &k.x_min, nx)?,
        x_max: bound("constraints.x_max", &k.x_max, nx)?,
        ..Constraints::default()
    };
    if !k.obstacles.is_empty() {
        let position = match k.position {
            Some([i, j]) => (i, j),
            None => model
                .position()
                .ok_or_else(|| config("constraints.position", "the model has no planar position"))?,
        };
        for (i, o) in k.obstacles.iter().enumerate() {
            if ![o.cx, o.cy, o.r].iter().all(|v| v.is_finite()) || o.r <= 0.0 {
                return Err(config(&format!("constraints.obstacles[{i}]"), "needs finite centre and positive radius"));
            }
        }
        constraints = constraints.with_obstacles(k.obstacles.clone(), position);
    }
    constraints.validate(nx, nu).map_err(|e| config("constraints", e))?;
    if constraints.stage_rows() == 0 {
        // Margins are reported per step and must be finite.
        return Err(config("constraints", "at least one input bound, state bound or obstacle is required"));
    }

    let mix = s.disturbance.mix.mix();
    if s.disturbance.mix.total() == 0 {
        return Err(config("disturbance.mix", "at least one rollout is required"));
    }
    match &s.campaign {
        CampaignSpec::Rollouts => {}
        CampaignSpec::Mpc { steps } => {
            if *steps == 0 {
                return Err(config("campaign.steps", "must be positive"));
            }
        }
        CampaignSpec::Sweep { horizons, steps } => {
            if *steps == 0 {
                return Err(config("campaign.steps", "must be positive"));
            }
            if horizons.is_empty() || horizons.contains(&0) {
                return Err(config("campaign.horizons", "must be a non-empty list of positive horizons"));
            }
        }
    }

    let a = &s.solver.admm;
    let admm = AdmmSettings {
        rho0: a.rho0,
        rho_min: a.rho_min,
        rho_max: a.rho_max,
        sigma: a.sigma,
        tol_primal: a.tol,
        tol_dual: a.tol,
        max_iter: a.max_iter,
        use_cache: a.use_cache,
    };
    admm.validate().map_err(|e| config("solver.admm", e))?;
    let p = &s.solver.sqp;
    let step = match p.step {
        StepSpec::Merit => StepPolicy::Merit,
        StepSpec::Full => StepPolicy::Full,
    };
    let sqp = SqpSettings { max_iters: p.max_iters, kkt_tol: p.kkt_tol, step, admm };
    sqp.validate().map_err(|e| config("solver.sqp", e))?;

    let l = &s.solver.sls;
    if !(l.scale.is_finite() && l.scale > 0.0) {
        return Err(config("solver.sls.scale", "must be positive"));
    }
    let weight = |field: &str, v: &Option<Vec<f64>>, len: usize| -> Result<Mat, CliError> {
        let d = match v {
            Some(v) => nonnegative_diag(field, v, len)?,
            None => vec![1.0; len],
        };
        Ok(Mat::from_diagonal(&Vector::from_vec(d)) * l.scale)
    };
    let weights = SlsWeights {
        q: weight("solver.sls.q", &l.q, nx)?,
        r: weight("solver.sls.r", &l.r, nu)?,
        q_terminal: weight("solver.sls.q_terminal", &l.q_terminal, nx)?,
    };
    weights.validate().map_err(|e| config("solver.sls", e))?;
    if !(l.tol_h.is_finite() && l.tol_h > 0.0) || l.max_alternations == 0 || l.infeasible_patience == 0 {
        return Err(config("solver.sls", "tol_h, max_alternations and infeasible_patience must be positive"));
    }
    let robust = RobustSettings {
        tol_h: l.tol_h,
        max_alternations: l.max_alternations,
        infeasible_patience: l.infeasible_patience,
        ..RobustSettings::new(sqp.clone(), weights)
    };

    let ocp = Ocp { model, constraints, cost, horizon: s.horizon };
    ocp.validate().map_err(|e| config("scenario", e))?;
    Ok(Prepared {
        ocp,
        x0,
        mix,
        seed: s.disturbance.seed,
        mode: s.mode,
        campaign: s.campaign.clone(),
        sqp,
        robust,
        rti: s.solver.rti,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutRow {
    pub id: usize,
    pub safe: bool,
    pub min_margin: f64,
    pub max_w_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clearance {
    pub id: usize,
    pub step: usize,
    pub margin: f64,
}

/// Everything a campaign produced, possibly cut short by `failure`.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub steps: Vec<StepRecord>,
    pub rollouts: Vec<RolloutRow>,
    pub clearances: Vec<Clearance>,
    pub failure: Option<Error>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_solve_ms: f64,
    pub median_solve_ms: f64,
    pub safety_rate: f64,
    pub total_steps: usize,
    pub scan_depth: usize,
    pub converged_fraction: f64,
}

impl Summary {
    /// Timing statistics skip steps below [`WARMUP_STEPS`] unless nothing
    /// else is left. An empty rollout set has safety rate 0.
    pub fn from_outcome(o: &Outcome) -> Summary {
        let timed: Vec<f64> = o.steps.iter().filter(|s| s.step >= WARMUP_STEPS).map(|s| s.solve_ms).collect();
        let mut timed = if timed.is_empty() { o.steps.iter().map(|s| s.solve_ms).collect() } else { timed };
        let mean = if timed.is_empty() { 0.0 } else { timed.iter().sum::<f64>() / timed.len() as f64 };
        timed.sort_by(f64::total_cmp);
        let median = match timed.len() {
            0 => 0.0,
            n if n % 2 == 1 => timed[n / 2],
            n => 0.5 * (timed[n / 2 - 1] + timed[n / 2]),
        };
        let safe = o.rollouts.iter().filter(|r| r.safe).count();
        let converged = o.steps.iter().filter(|s| s.converged).count();
        Summary {
            mean_solve_ms: mean,
            median_solve_ms: median,
            safety_rate: if o.rollouts.is_empty() { 0.0 } else { safe as f64 / o.rollouts.len() as f64 },
            total_steps: o.steps.len(),
            scan_depth: o.steps.iter().map(|s| s.scan_layers).max().unwrap_or(0),
            converged_fraction: if o.steps.is_empty() { 0.0 } else { converged as f64 / o.steps.len() as f64 },
        }
    }
}

fn margin(g: &Vector) -> f64 {
    -g.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn rollout_clearances(ocp: &Ocp, r: &RolloutRecord) -> Vec<Clearance> {
    let n = r.u.len();
    let mut out: Vec<Clearance> = (0..n)
        .map(|k| Clearance { id: r.id, step: k, margin: margin(&ocp.constraints.stage(&r.x[k], &r.u[k])) })
        .collect();
    if ocp.constraints.terminal_rows() > 0 {
        out.push(Clearance { id: r.id, step: n, margin: margin(&ocp.constraints.terminal(&r.x[n])) });
    }
    out
}

/// Open-loop rollout of the reference input from the scenario's initial state.
pub fn initial_guess(p: &Prepared) -> Result<Trajectory, Error> {
    Trajectory::rollout(p.ocp.model.as_ref(), &p.x0, vec![p.ocp.cost.u_ref.clone(); p.ocp.horizon])
}

#[allow(clippy::too_many_arguments)]
fn solve_row(
    p: &Prepared,
    u0: &Vector,
    solve_ms: f64,
    sqp_iters: usize,
    admm_iters: usize,
    kkt: f64,
    h: f64,
    converged: bool,
    layers: usize,
) -> StepRecord {
    StepRecord {
        step: 0,
        solve_ms,
        sqp_iters,
        admm_iters,
        kkt_residual: kkt,
        min_constraint_margin: margin(&p.ocp.constraints.stage(&p.x0, u0)),
        max_tube_h: h,
        converged,
        scan_layers: layers,
    }
}

fn rollouts_campaign(p: &Prepared, mode: Mode, exec: &Executor) -> Outcome {
    let mut out = Outcome::default();
    let guess = match initial_guess(p) {
        Ok(g) => g,
        Err(e) => {
            out.failure = Some(e);
            return out;
        }
    };
    let started = Instant::now();
    let solved = match mode {
        Mode::Robust => solve_robust(&p.ocp, &p.x0, &p.robust, &guess, exec).map(|s| {
            let ms = started.elapsed().as_secs_f64() * 1e3;
            let row = solve_row(
                p,
                &s.nominal.traj.u[0],
                ms,
                s.stats.sqp_iterations,
                s.stats.admm_iterations,
                s.nominal.stats.kkt_residual,
                s.tightening.max_entry(),
                s.stats.converged,
                s.stats.scan_layers,
            );
            (row, s.nominal.traj, s.response, s.tightening)
        }),
        Mode::Nominal => sqp::solve_nmpc(&p.ocp, &p.x0, &p.sqp, &guess, None, None, exec).and_then(|s| {
            let ms = started.elapsed().as_secs_f64() * 1e3;
            let qp = sqp::linearize(&p.ocp, &s.traj, None, exec)?;
            let row = solve_row(
                p,
                &s.traj.u[0],
                ms,
                s.stats.iterations,
                s.stats.admm_iterations,
                s.stats.kkt_residual,
                0.0,
                s.stats.converged,
                s.stats.scan_layers,
            );
            let (nx, nu) = (p.ocp.model.nx(), p.ocp.model.nu());
            Ok((row, s.traj, SlsResponse::zeros(p.ocp.horizon, nx, nu), Tightening::zeros(&qp)))
        }),
    };
    let (row, plan, phi, h) = match solved {
        Ok(v) => v,
        Err(e) => {
            out.failure = Some(e);
            return out;
        }
    };
    out.steps.push(row);
    match run_rollouts(&p.ocp, &plan, &phi, &h, &p.mix, p.seed, exec) {
        Ok(records) => {
            for r in &records {
                out.rollouts.push(RolloutRow { id: r.id, safe: r.safe, min_margin: r.min_margin, max_w_norm: r.max_w_norm });
                out.clearances.extend(rollout_clearances(&p.ocp, r));
            }
        }
        Err(e) => out.failure = Some(e),
    }
    out
}

/// Receding-horizon controller for `mode` with the scenario's settings.
pub fn controller(p: &Prepared, ocp: &Ocp, mode: Mode) -> Box<dyn Controller> {
    match mode {
        Mode::Nominal => Box::new(NominalMpc::new(ocp.clone(), p.sqp.clone(), p.rti)),
        Mode::Robust => Box::new(RobustMpc::new(ocp.clone(), p.robust.clone(), p.rti)),
    }
}

fn mpc_campaign(p: &Prepared, ocp: &Ocp, mode: Mode, steps: usize, exec: &Executor) -> Outcome {
    let results = try_mpc_campaign(
        || controller(p, ocp, mode),
        ocp.model.as_ref(),
        &ocp.constraints,
        &p.x0,
        steps,
        &p.mix,
        p.seed,
        exec,
    );
    let mut out = Outcome::default();
    for r in results {
        match r {
            Ok(MpcRecord { id, steps, safe, min_margin, max_w_norm, .. }) => {
                out.clearances.extend(steps.iter().map(|s| Clearance { id, step: s.step, margin: s.min_constraint_margin }));
                out.steps.extend(steps);
                out.rollouts.push(RolloutRow { id, safe, min_margin, max_w_norm });
            }
            Err(e) => {
                if out.failure.is_none() {
                    out.failure = Some(e);
                }
            }
        }
    }
    out
}

fn write_csv<T>(path: &Path, header: &[&str], rows: &[T], fields: impl Fn(&T) -> Vec<String>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Solver(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| CliError::Solver(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(fields(row)).map_err(fail)?;
    }
    w.flush().map_err(|e| io_failure(path, e))
}

/// Writes `results.csv`, `rollouts.csv` and `summary.json` into `dir`.
pub fn write_artifacts(dir: &Path, o: &Outcome) -> Result<Summary, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    write_csv(
        &dir.join("results.csv"),
        &["step", "solve_ms", "sqp_iters", "admm_iters", "kkt_residual", "min_constraint_margin", "max_tube_h"],
        &o.steps,
        |s| {
            vec![
                s.step.to_string(),
                s.solve_ms.to_string(),
                s.sqp_iters.to_string(),
                s.admm_iters.to_string(),
                s.kkt_residual.to_string(),
                s.min_constraint_margin.to_string(),
                s.max_tube_h.to_string(),
            ]
        },
    )?;
    write_csv(&dir.join("rollouts.csv"), &["id", "safe", "min_margin", "max_w_norm"], &o.rollouts, |r| {
        vec![r.id.to_string(), (r.safe as u8).to_string(), r.min_margin.to_string(), r.max_w_norm.to_string()]
    })?;
    let summary = Summary::from_outcome(o);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Solver(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn failure(o: &Outcome) -> Result<(), CliError> {
    match &o.failure {
        Some(e) => Err(CliError::Solver(e.to_string())),
        None => Ok(()),
    }
}

fn campaign(p: &Prepared, mode: Mode, exec: &Executor) -> Outcome {
    match &p.campaign {
        CampaignSpec::Rollouts => rollouts_campaign(p, mode, exec),
        CampaignSpec::Mpc { steps } => mpc_campaign(p, &p.ocp, mode, *steps, exec),
        CampaignSpec::Sweep { .. } => unreachable!("sweeps are dispatched per horizon"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub horizon: usize,
    pub mean_solve_ms: f64,
    pub median_solve_ms: f64,
    pub scan_depth: usize,
    /// `scan_depth` predicted for the `N + 1` value-scan elements.
    pub expected_depth: usize,
    pub steps: usize,
}

/// Runs the scenario in its own mode and writes artifacts under `out`.
pub fn run(p: &Prepared, out: &Path, exec: &Executor) -> Result<Summary, CliError> {
    if let CampaignSpec::Sweep { horizons, steps } = &p.campaign {
        let mut all = Outcome::default();
        let mut timing = Vec::new();
        for &n in horizons {
            let ocp = Ocp { horizon: n, ..p.ocp.clone() };
            let o = mpc_campaign(p, &ocp, p.mode, *steps, exec);
            let s = write_artifacts(&out.join(format!("horizon_{n}")), &o)?;
            timing.push(TimingRow {
                horizon: n,
                mean_solve_ms: s.mean_solve_ms,
                median_solve_ms: s.median_solve_ms,
                scan_depth: s.scan_depth,
                expected_depth: scan_depth(n + 1),
                steps: s.total_steps,
            });
            let failed = o.failure.clone();
            all.steps.extend(o.steps);
            all.rollouts.extend(o.rollouts);
            if failed.is_some() {
                all.failure = failed;
                break;
            }
        }
        write_csv(
            &out.join("timing.csv"),
            &["horizon", "mean_solve_ms", "median_solve_ms", "scan_depth", "expected_depth", "steps"],
            &timing,
            |t| {
                vec![
                    t.horizon.to_string(),
                    t.mean_solve_ms.to_string(),
                    t.median_solve_ms.to_string(),
                    t.scan_depth.to_string(),
                    t.expected_depth.to_string(),
                    t.steps.to_string(),
                ]
            },
        )?;
        let summary = Summary::from_outcome(&all);
        fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
        write_json(&out.join("summary.json"), &summary)?;
        failure(&all)?;
        return Ok(summary);
    }
    let o = campaign(p, p.mode, exec);
    let summary = write_artifacts(out, &o)?;
    failure(&o)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rollouts: usize,
    pub nominal: Summary,
    pub robust: Summary,
}

/// Runs both modes on identical seeded disturbances: `out/nominal/`,
/// `out/robust/`, `compare.json` and per-step `clearances.csv`.
pub fn compare(p: &Prepared, out: &Path, exec: &Executor) -> Result<Comparison, CliError> {
    if matches!(p.campaign, CampaignSpec::Sweep { .. }) {
        return Err(config("campaign", "compare needs a rollouts or mpc campaign"));
    }
    let nominal = campaign(p, Mode::Nominal, exec);
    let nominal_summary = write_artifacts(&out.join("nominal"), &nominal)?;
    let robust = if nominal.failure.is_none() { campaign(p, Mode::Robust, exec) } else { Outcome::default() };
    let robust_summary = write_artifacts(&out.join("robust"), &robust)?;
    let rows: Vec<(&str, &Clearance)> = nominal
        .clearances
        .iter()
        .map(|c| ("nominal", c))
        .chain(robust.clearances.iter().map(|c| ("robust", c)))
        .collect();
    write_csv(&out.join("clearances.csv"), &["mode", "id", "step", "margin"], &rows, |(m, c)| {
        vec![m.to_string(), c.id.to_string(), c.step.to_string(), c.margin.to_string()]
    })?;
    let cmp = Comparison { rollouts: nominal.rollouts.len(), nominal: nominal_summary, robust: robust_summary };
    write_json(&out.join("compare.json"), &cmp)?;
    failure(&nominal)?;
    failure(&robust)?;
    Ok(cmp)
}

/// One oracle check of the self-test.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Quick oracle suites on seeded random instances.
pub fn selftest(exec: &Executor) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    let mut ok = true;
    for i in 0..20 {
        let qp = random_ltv_qp(&mut rng, 1 + i % 6, 1 + i % 3, 0, 4 + 3 * i);
        match (lqr::solve(&qp, exec), reference::riccati_lqr(&qp)) {
            (Ok(a), Ok(b)) => {
                let report = reference::compare_lqr("riccati", &a, &b);
                worst = worst.max(report.max_rel);
                ok &= report.passes(1e-8);
            }
            _ => ok = false,
        }
    }
    checks.push(Check { name: "scan LQR vs Riccati", passed: ok, detail: format!("max rel error {worst:.2e}") });

    let qp = random_ltv_qp(&mut rng, 4, 2, 0, 33);
    let cached = lqr::build_cache(&qp, 0, exec).and_then(|(cache, full)| {
        let mut moved = qp.clone();
        for s in &mut moved.stages {
            s.q_lin *= 1.5;
        }
        let replay = lqr::solve_cached(&moved, &cache, 0, exec)?;
        Ok(full == lqr::solve(&qp, exec)? && replay == lqr::solve(&moved, exec)?)
    });
    checks.push(Check {
        name: "cached LQR replay",
        passed: cached == Ok(true),
        detail: "bitwise equal to a fresh solve".into(),
    });

    let nodes = [1usize, 7, 31, 100];
    let depth_ok = nodes.iter().all(|&n| {
        let qp = random_ltv_qp(&mut rng, 2, 1, 0, n);
        lqr::solve(&qp, exec).map(|s| s.value_layers == scan_depth(n + 1)).unwrap_or(false)
    });
    checks.push(Check { name: "scan depth", passed: depth_ok, detail: format!("2·log2 layers for N in {nodes:?}") });

    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..5 {
        let qp = random_ltv_qp(&mut rng, 3, 2, 2, 8);
        let dense = reference::dense_qp(&reference::flatten_qp(&qp));
        let admm = admm::solve_qp(&qp, &AdmmSettings { max_iter: 20000, ..AdmmSettings::with_tol(1e-7) }, None, exec);
        match (admm, dense) {
            (Ok(a), Ok(d)) => {
                let (dx, du) = reference::unflatten(&qp, &d.x);
                let expected = qp.objective(&dx, &du);
                let got = qp.objective(&a.solution.dx, &a.solution.du);
                let rel = (got - expected).abs() / expected.abs().max(1.0);
                worst = worst.max(rel);
                ok &= rel <= 1e-4 && a.stats.converged;
            }
            _ => ok = false,
        }
    }
    checks.push(Check { name: "ADMM vs interior point", passed: ok, detail: format!("max rel objective gap {worst:.2e}") });

    let qp = random_ltv_qp(&mut rng, 3, 2, 2, 10);
    let e: Vec<Mat> = (0..10).map(|_| normal_mat(&mut rng, 3, 3) * 0.1).collect();
    let costs = sls::assemble_costs(&SlsDuals::zeros(&qp), &qp, &SlsWeights::identity(3, 2));
    let synth = sls::synthesize(&qp, &e, &costs, exec).and_then(|a| {
        let b = reference::fastsls_sequential(&qp, &e, &costs)?;
        let mut worst = 0.0f64;
        for j in 0..10 {
            for k in j + 1..=10 {
                let (x, y) = (a.phi_x(k, j).unwrap(), b.phi_x(k, j).unwrap());
                worst = worst.max((x - y).amax() / (1.0 + y.amax()));
            }
        }
        Ok((worst, a.dynamics_residual(&qp)))
    });
    checks.push(match synth {
        Ok((worst, residual)) => Check {
            name: "response synthesis vs recursions",
            passed: worst <= 1e-8 && residual <= 1e-8,
            detail: format!("max rel error {worst:.2e}, dynamics residual {residual:.2e}"),
        },
        Err(e) => Check { name: "response synthesis vs recursions", passed: false, detail: e.to_string() },
    });
    checks
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExecutorKind {
    Seq,
    Par,
}

#[derive(Debug, Parser)]
#[command(name = "robust-mpc", version, about = "Robust nonlinear MPC scenario runner")]
pub struct Args {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for the parallel executor [default: SOLVER_THREADS or all cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, value_enum, default_value = "seq", global = true)]
    pub executor: ExecutorKind,
    /// Output directory, overriding the scenario's.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the scenario's campaign in its configured mode.
    Run { scenario: PathBuf },
    /// Run nominal and robust MPC on identical disturbances.
    Compare { scenario: PathBuf },
    /// Run the oracle suites.
    Selftest,
}

fn executor(args: &Args) -> Result<Executor, CliError> {
    match args.executor {
        ExecutorKind::Seq => Ok(Executor::Sequential),
        ExecutorKind::Par => {
            let threads = match args.threads {
                Some(t) => t,
                None => match std::env::var("SOLVER_THREADS") {
                    Ok(v) => v.parse().map_err(|_| CliError::Config(format!("SOLVER_THREADS: invalid count {v:?}")))?,
                    Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
                },
            };
            Executor::parallel(threads).map_err(|e| CliError::Config(format!("--threads: {e}")))
        }
    }
}

fn output_dir(args: &Args, s: &Scenario) -> PathBuf {
    args.out.clone().or_else(|| s.output.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

/// Executes parsed arguments; returns the process exit code.
pub fn main_with(args: Args) -> i32 {
    let result = (|| -> Result<(), CliError> {
        let exec = executor(&args)?;
        match &args.command {
            Command::Run { scenario } => {
                let s = load_scenario(scenario)?;
                let p = prepare(&s)?;
                let out = output_dir(&args, &s);
                let summary = run(&p, &out, &exec)?;
                println!(
                    "{}: safety rate {:.3}, {} steps, mean solve {:.2} ms, median {:.2} ms -> {}",
                    p.mode.as_str(),
                    summary.safety_rate,
                    summary.total_steps,
                    summary.mean_solve_ms,
                    summary.median_solve_ms,
                    out.display()
                );
                Ok(())
            }
            Command::Compare { scenario } => {
                let s = load_scenario(scenario)?;
                let p = prepare(&s)?;
                let out = output_dir(&args, &s);
                let c = compare(&p, &out, &exec)?;
                println!(
                    "{} rollouts: nominal safety rate {:.3}, robust safety rate {:.3} -> {}",
                    c.rollouts,
                    c.nominal.safety_rate,
                    c.robust.safety_rate,
                    out.display()
                );
                Ok(())
            }
            Command::Selftest => {
                let checks = selftest(&exec);
                for c in &checks {
                    println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
                if checks.iter().all(|c| c.passed) {
                    Ok(())
                } else {
                    Err(CliError::Solver("self-test failed".into()))
                }
            }
        }
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
