//! Disturbance-feedback synthesis and constraint tightening.
//!
//! For the LTV error dynamics `e⁺ = A e + B δu + E w` the closed-loop
//! response to disturbance `w_j` is the pair `Φˣ_{k,j}`, `Φᵘ_{k,j}` for
//! `k > j`, starting from `Φˣ_{j+1,j} = E_j`. Each `j` is an independent
//! matrix-valued LQR over stages `j+1..N`; [`synthesize`] solves all of them
//! with the same reverse value scan as the nominal solver and recovers the
//! responses with a forward matrix-product scan.
//!
//! Blocks are stored ragged by disturbance: entry `(k, j)` lives at
//! `[j][k - j - 1]`.

use crate::admm::AdmmState;
use crate::error::{Error, Result};
use crate::linalg::{row_norms, symmetrize, Mat, Vector};
use crate::lqr::{self, LtvQp, Stage, Terminal};
use crate::scan::{inclusive_scan, Direction, Executor};
use crate::sqp::{self, Ocp, SqpResult, SqpSettings, Trajectory};

/// Quadratic weights on the system responses.
#[derive(Clone, Debug, PartialEq)]
pub struct SlsWeights {
    pub q: Mat,
    pub r: Mat,
    pub q_terminal: Mat,
}

impl SlsWeights {
    pub fn identity(nx: usize, nu: usize) -> Self {
        SlsWeights { q: Mat::identity(nx, nx), r: Mat::identity(nu, nu), q_terminal: Mat::identity(nx, nx) }
    }

    pub fn validate(&self) -> Result<()> {
        for (m, what) in [(&self.q, "Q"), (&self.r, "R"), (&self.q_terminal, "Q_N")] {
            let sym = (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax());
            if !sym || nalgebra::Cholesky::new(m.clone()).is_none() {
                return Err(Error::Settings(format!("SLS weight {what} must be symmetric positive definite")));
            }
        }
        Ok(())
    }
}

/// Closed-loop responses and the per-disturbance feedback gains.
#[derive(Clone, Debug, PartialEq)]
pub struct SlsResponse {
    /// `[j][k - j - 1]`, `k ∈ j+1..=N`
    phi_x: Vec<Vec<Mat>>,
    /// `[j][k - j - 1]`, `k ∈ j+1..N`
    phi_u: Vec<Vec<Mat>>,
    gains: Vec<Vec<Mat>>,
}

impl SlsResponse {
    pub fn from_parts(phi_x: Vec<Vec<Mat>>, phi_u: Vec<Vec<Mat>>, gains: Vec<Vec<Mat>>) -> Self {
        SlsResponse { phi_x, phi_u, gains }
    }

    /// All-zero response for a horizon of `n` stages.
    pub fn zeros(n: usize, nx: usize, nu: usize) -> Self {
        SlsResponse {
            phi_x: (0..n).map(|j| vec![Mat::zeros(nx, nx); n - j]).collect(),
            phi_u: (0..n).map(|j| vec![Mat::zeros(nu, nx); n - j - 1]).collect(),
            gains: (0..n).map(|j| vec![Mat::zeros(nu, nx); n - j - 1]).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.phi_x.len()
    }

    pub fn phi_x(&self, k: usize, j: usize) -> Option<&Mat> {
        if k <= j {
            return None;
        }
        self.phi_x.get(j)?.get(k - j - 1)
    }

    pub fn phi_u(&self, k: usize, j: usize) -> Option<&Mat> {
        if k <= j {
            return None;
        }
        self.phi_u.get(j)?.get(k - j - 1)
    }

    pub fn gain(&self, k: usize, j: usize) -> Option<&Mat> {
        if k <= j {
            return None;
        }
        self.gains.get(j)?.get(k - j - 1)
    }

    /// Largest `‖Φˣ_{k+1,j} - A_k Φˣ_{k,j} - B_k Φᵘ_{k,j}‖_F`.
    pub fn dynamics_residual(&self, qp: &LtvQp) -> f64 {
        let n = self.horizon();
        let mut worst = 0.0f64;
        for j in 0..n {
            for k in j + 1..n {
                let s = &qp.stages[k];
                let r = self.phi_x(k + 1, j).unwrap() - &s.a * self.phi_x(k, j).unwrap() - &s.b * self.phi_u(k, j).unwrap();
                worst = worst.max(r.norm());
            }
        }
        worst
    }
}

/// Constraint margins `h_k` (stages `0..N`) and `h^f`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tightening {
    pub stage: Vec<Vector>,
    pub terminal: Vector,
}

impl Tightening {
    pub fn zeros(qp: &LtvQp) -> Self {
        Tightening {
            stage: qp.stages.iter().map(|s| Vector::zeros(s.nc())).collect(),
            terminal: Vector::zeros(qp.terminal.nf()),
        }
    }

    pub fn max_entry(&self) -> f64 {
        self.stage.iter().chain(std::iter::once(&self.terminal)).fold(0.0f64, |m, v| m.max(v.amax()))
    }

    /// `‖self - other‖_∞` over every entry.
    pub fn distance(&self, other: &Tightening) -> f64 {
        self.stage
            .iter()
            .zip(&other.stage)
            .chain(std::iter::once((&self.terminal, &other.terminal)))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).amax()))
    }

    /// Drops stage 0 and duplicates the last stage.
    pub fn shifted(&self) -> Self {
        let mut stage: Vec<Vector> = self.stage[1..].to_vec();
        stage.push(self.stage.last().cloned().unwrap_or_else(|| Vector::zeros(0)));
        Tightening { stage, terminal: self.terminal.clone() }
    }
}

/// Reweighting duals `τ_{k,j}` and the squared row norms `β_{k,j}`, for
/// `k ∈ j+1..=N` (the last entry of each `j` is the terminal set).
#[derive(Clone, Debug, PartialEq)]
pub struct SlsDuals {
    pub tau: Vec<Vec<Vector>>,
    pub beta: Vec<Vec<Vector>>,
    pub epsilon: f64,
}

impl SlsDuals {
    pub fn zeros(qp: &LtvQp) -> Self {
        let n = qp.horizon();
        let entries = |j: usize| -> Vec<Vector> {
            (j + 1..=n)
                .map(|k| Vector::zeros(if k == n { qp.terminal.nf() } else { qp.stages[k].nc() }))
                .collect()
        };
        let tau: Vec<Vec<Vector>> = (0..n).map(entries).collect();
        SlsDuals { beta: tau.clone(), tau, epsilon: DEFAULT_EPSILON }
    }

    /// Time shift by one stage: `(k, j) ← (k + 1, j + 1)`, the last
    /// disturbance duplicated, stage entries without a source set to zero.
    pub fn shifted(&self) -> Self {
        let n = self.tau.len();
        let shift = |src: &Vec<Vec<Vector>>| -> Vec<Vec<Vector>> {
            (0..n)
                .map(|j| {
                    let from = &src[(j + 1).min(n - 1)];
                    let len = n - j;
                    let terminal = from.last().cloned().unwrap_or_else(|| Vector::zeros(0));
                    let mut out = Vec::with_capacity(len);
                    for i in 0..len - 1 {
                        // Stage entries of the source, excluding its terminal entry.
                        let stage = if from.len() >= 2 { from.get(i).filter(|_| i < from.len() - 1) } else { None };
                        let fallback = || {
                            src[j].get(i).cloned().map(|v| v * 0.0).unwrap_or_else(|| Vector::zeros(0))
                        };
                        out.push(stage.cloned().unwrap_or_else(fallback));
                    }
                    out.push(terminal);
                    out
                })
                .collect()
        };
        SlsDuals { tau: shift(&self.tau), beta: shift(&self.beta), epsilon: self.epsilon }
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Splits the stacked multipliers into per-stage vectors (terminal last).
pub fn split_duals(qp: &LtvQp, stacked: &Vector) -> Vec<Vector> {
    let offsets = qp.row_offsets();
    let mut out: Vec<Vector> =
        qp.stages.iter().enumerate().map(|(k, s)| stacked.rows(offsets[k], s.nc()).into_owned()).collect();
    out.push(stacked.rows(offsets[qp.horizon()], qp.terminal.nf()).into_owned());
    out
}

fn constraint_image(qp: &LtvQp, phi: &SlsResponse, k: usize, j: usize) -> Mat {
    let n = qp.horizon();
    let x = phi.phi_x(k, j).expect("k > j");
    if k == n {
        &qp.terminal.c * x
    } else {
        let s = &qp.stages[k];
        &s.c * x + &s.d * phi.phi_u(k, j).expect("k < N")
    }
}

/// `β_{k,j} = rownorm²(C_kΦˣ_{k,j} + D_kΦᵘ_{k,j})`, `τ_{k,j} = max(λ_k, 0)/√(β + ε)`.
pub fn compute_duals(lambda: &[Vector], phi: &SlsResponse, qp: &LtvQp, epsilon: f64) -> SlsDuals {
    let n = qp.horizon();
    let mut tau = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    for j in 0..n {
        let mut tj = Vec::with_capacity(n - j);
        let mut bj = Vec::with_capacity(n - j);
        for k in j + 1..=n {
            let b = row_norms(&constraint_image(qp, phi, k, j)).map(|v| v * v);
            let t = Vector::from_fn(b.len(), |i, _| lambda[k][i].max(0.0) / (b[i] + epsilon).sqrt());
            tj.push(t);
            bj.push(b);
        }
        tau.push(tj);
        beta.push(bj);
    }
    SlsDuals { tau, beta, epsilon }
}

/// Blocks of `𝒬ᵀ𝒬` for one `(k, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostBlock {
    pub qx: Mat,
    pub qu: Mat,
    /// `n_x × n_u`; the `ux` block is its transpose.
    pub qxu: Mat,
}

/// Synthesis costs, stage blocks at `[j][k - j - 1]` for `k ∈ j+1..N` and
/// one terminal block per `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlsCosts {
    stage: Vec<Vec<CostBlock>>,
    terminal: Vec<Mat>,
}

impl SlsCosts {
    pub fn stage(&self, k: usize, j: usize) -> &CostBlock {
        &self.stage[j][k - j - 1]
    }

    pub fn terminal(&self, j: usize) -> &Mat {
        &self.terminal[j]
    }
}

fn weighted_gram(a: &Mat, tau: &Vector, b: &Mat) -> Mat {
    let mut scaled = b.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= tau[i];
    }
    a.transpose() * scaled
}

/// `[C D]ᵀ diag(τ) [C D] + blkdiag(Q̄, R̄)` and the terminal analog.
pub fn assemble_costs(duals: &SlsDuals, qp: &LtvQp, weights: &SlsWeights) -> SlsCosts {
    let n = qp.horizon();
    let mut stage = Vec::with_capacity(n);
    let mut terminal = Vec::with_capacity(n);
    for j in 0..n {
        let blocks = (j + 1..n)
            .map(|k| {
                let s = &qp.stages[k];
                let tau = &duals.tau[j][k - j - 1];
                CostBlock {
                    qx: symmetrize(&(weighted_gram(&s.c, tau, &s.c) + &weights.q)),
                    qu: symmetrize(&(weighted_gram(&s.d, tau, &s.d) + &weights.r)),
                    qxu: weighted_gram(&s.c, tau, &s.d),
                }
            })
            .collect();
        stage.push(blocks);
        let tau = duals.tau[j].last().expect("terminal entry");
        terminal.push(symmetrize(&(weighted_gram(&qp.terminal.c, tau, &qp.terminal.c) + &weights.q_terminal)));
    }
    SlsCosts { stage, terminal }
}

/// Solves every per-disturbance problem; `e[j]` is the injection map at
/// stage `j`.
pub fn synthesize(qp: &LtvQp, e: &[Mat], costs: &SlsCosts, exec: &Executor) -> Result<SlsResponse> {
    let n = qp.horizon();
    let nx = qp.nx();
    if e.len() < n || e.iter().take(n).any(|m| m.shape() != (nx, nx)) {
        return Err(Error::Dimension("one n_x × n_x disturbance map per stage is required".into()));
    }
    let per_j = exec.try_map(n, |j| {
        let stages: Vec<Stage> = (j + 1..n)
            .map(|k| {
                let s = &qp.stages[k];
                let c = costs.stage(k, j);
                let mut st = Stage::new(s.a.clone(), s.b.clone(), c.qx.clone(), c.qu.clone());
                st.s = c.qxu.transpose();
                st
            })
            .collect();
        let sub = LtvQp { stages, terminal: Terminal::new(costs.terminal(j).clone()), dx0: Vector::zeros(nx) };
        let vp = lqr::value_pass(&sub, exec).map_err(|err| match err {
            Error::SingularStage { stage } => Error::SingularSynthesis { k: j + 1 + stage, j },
            other => other,
        })?;
        let mut maps = Vec::with_capacity(n - j);
        maps.push(e[j].clone());
        for (i, k) in (j + 1..n).enumerate() {
            let s = &qp.stages[k];
            maps.push(&s.a + &s.b * &vp.gains[i]);
        }
        let phi_x = inclusive_scan(maps, |earlier, later| later * earlier, Direction::Forward, exec)?.values;
        let phi_u: Vec<Mat> = vp.gains.iter().zip(&phi_x).map(|(k, x)| k * x).collect();
        Ok((phi_x, phi_u, vp.gains))
    })?;
    let mut out = SlsResponse { phi_x: Vec::with_capacity(n), phi_u: Vec::with_capacity(n), gains: Vec::with_capacity(n) };
    for (x, u, g) in per_j {
        out.phi_x.push(x);
        out.phi_u.push(u);
        out.gains.push(g);
    }
    Ok(out)
}

/// `h_k = Σ_{j<k} rownorm(C_kΦˣ_{k,j} + D_kΦᵘ_{k,j})`, `h^f` with `C_N`.
pub fn tighten(phi: &SlsResponse, qp: &LtvQp) -> Tightening {
    let n = qp.horizon();
    let mut h = Tightening::zeros(qp);
    for k in 1..=n {
        let acc = if k == n { &mut h.terminal } else { &mut h.stage[k] };
        for j in 0..k {
            *acc += row_norms(&constraint_image(qp, phi, k, j));
        }
    }
    h
}

/// `Σ_j Σ_k ‖Q̄^½Φˣ‖²_F + ‖R̄^½Φᵘ‖²_F + ‖Q̄_N^½Φˣ_N‖²_F`
pub fn sls_cost(phi: &SlsResponse, weights: &SlsWeights) -> f64 {
    let n = phi.horizon();
    let quad = |w: &Mat, m: &Mat| m.component_mul(&(w * m)).sum();
    let mut total = 0.0;
    for j in 0..n {
        for k in j + 1..n {
            total += quad(&weights.q, phi.phi_x(k, j).unwrap()) + quad(&weights.r, phi.phi_u(k, j).unwrap());
        }
        total += quad(&weights.q_terminal, phi.phi_x(n, j).unwrap());
    }
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustSettings {
    pub sqp: SqpSettings,
    pub weights: SlsWeights,
    /// Stop when `‖Δh‖_∞` falls to this.
    pub tol_h: f64,
    pub max_alternations: usize,
    pub epsilon: f64,
    /// Non-converged nominal solves tolerated in a row before giving up.
    pub infeasible_patience: usize,
}

impl RobustSettings {
    pub fn new(sqp: SqpSettings, weights: SlsWeights) -> Self {
        RobustSettings { sqp, weights, tol_h: 1e-3, max_alternations: 20, epsilon: DEFAULT_EPSILON, infeasible_patience: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RobustStats {
    pub alternations: usize,
    pub converged: bool,
    pub sqp_iterations: usize,
    pub admm_iterations: usize,
    /// `‖Δh‖_∞` of the last alternation.
    pub tightening_change: f64,
    pub scan_layers: usize,
}

/// Nominal plan together with the response and tightening it was solved
/// against.
#[derive(Clone, Debug)]
pub struct RobustSolution {
    pub nominal: SqpResult,
    pub response: SlsResponse,
    pub tightening: Tightening,
    /// Duals for warm-starting the next synthesis.
    pub tau: SlsDuals,
    pub stats: RobustStats,
}

fn disturbance_maps(ocp: &Ocp, traj: &Trajectory) -> Vec<Mat> {
    (0..ocp.horizon).map(|k| ocp.model.disturbance(&traj.x[k])).collect()
}

/// Alternates tightened nominal solves with controller synthesis until the
/// tightening settles. The returned plan satisfies its own tightening.
pub fn solve_robust(
    ocp: &Ocp,
    x0: &Vector,
    settings: &RobustSettings,
    guess: &Trajectory,
    exec: &Executor,
) -> Result<RobustSolution> {
    solve_robust_warm(ocp, x0, settings, guess, None, exec)
}

/// [`solve_robust`] with the first nominal solve warm-started from `warm`.
pub fn solve_robust_warm(
    ocp: &Ocp,
    x0: &Vector,
    settings: &RobustSettings,
    guess: &Trajectory,
    warm: Option<&AdmmState>,
    exec: &Executor,
) -> Result<RobustSolution> {
    settings.weights.validate()?;
    if !(settings.tol_h > 0.0) || settings.max_alternations == 0 {
        return Err(Error::Settings("tol_h and max_alternations must be positive".into()));
    }
    let mut guess = guess.clone();
    guess.x[0] = x0.clone();
    let qp0 = sqp::linearize(ocp, &guess, None, exec)?;
    let duals0 = SlsDuals { epsilon: settings.epsilon, ..SlsDuals::zeros(&qp0) };
    let mut response = synthesize(&qp0, &disturbance_maps(ocp, &guess), &assemble_costs(&duals0, &qp0, &settings.weights), exec)?;
    let mut h = tighten(&response, &qp0);
    let mut tau = duals0;

    let mut stats = RobustStats::default();
    let mut warm: Option<AdmmState> = warm.cloned();
    let mut failures = 0usize;
    let mut last: Option<RobustSolution> = None;
    for _ in 0..settings.max_alternations {
        let nominal = sqp::solve_nmpc(ocp, x0, &settings.sqp, &guess, Some(&h), warm.as_ref(), exec)?;
        stats.alternations += 1;
        stats.sqp_iterations += nominal.stats.iterations;
        stats.admm_iterations += nominal.stats.admm_iterations;
        stats.scan_layers = stats.scan_layers.max(nominal.stats.scan_layers);
        if nominal.stats.converged {
            failures = 0;
        } else {
            failures += 1;
            if failures >= settings.infeasible_patience {
                return Err(Error::RobustInfeasible);
            }
        }

        let qp = sqp::linearize(ocp, &nominal.traj, None, exec)?;
        let lambda = split_duals(&qp, &nominal.duals.lambda);
        let next_tau = compute_duals(&lambda, &response, &qp, settings.epsilon);
        let costs = assemble_costs(&next_tau, &qp, &settings.weights);
        let next_response = synthesize(&qp, &disturbance_maps(ocp, &nominal.traj), &costs, exec)?;
        let next_h = tighten(&next_response, &qp);
        stats.tightening_change = next_h.distance(&h);

        guess = nominal.traj.clone();
        warm = Some(nominal.duals.clone());
        let done = stats.tightening_change <= settings.tol_h && nominal.stats.converged;
        last = Some(RobustSolution {
            nominal,
            response: std::mem::replace(&mut response, next_response),
            tightening: std::mem::replace(&mut h, next_h),
            tau: std::mem::replace(&mut tau, next_tau),
            stats: stats.clone(),
        });
        if done {
            break;
        }
    }
    let mut sol = last.expect("at least one alternation runs");
    stats.converged = stats.tightening_change <= settings.tol_h && sol.nominal.stats.converged;
    sol.stats = stats;
    sol.tau = tau;
    Ok(sol)
}

#[derive(Clone, Debug)]
pub struct RobustRtiStep {
    pub u0: Vector,
    pub plan: Trajectory,
    pub response: SlsResponse,
    pub tightening: Tightening,
    pub next_guess: Trajectory,
    pub next_duals: AdmmState,
    /// Shifted `τ` for the next call.
    pub next_tau: SlsDuals,
    pub stats: sqp::SqpStats,
}

/// One linearization, one synthesis with the warm `τ`, one tightened QP.
pub fn rti_robust_step(
    ocp: &Ocp,
    x0: &Vector,
    settings: &RobustSettings,
    previous: &Trajectory,
    tau: Option<&SlsDuals>,
    warm: Option<&AdmmState>,
    exec: &Executor,
) -> Result<RobustRtiStep> {
    let mut traj = previous.clone();
    traj.x[0] = x0.clone();
    let mut qp = sqp::linearize(ocp, &traj, None, exec)?;
    let tau = match tau {
        Some(t) => t.clone(),
        None => SlsDuals { epsilon: settings.epsilon, ..SlsDuals::zeros(&qp) },
    };
    let costs = assemble_costs(&tau, &qp, &settings.weights);
    let response = synthesize(&qp, &disturbance_maps(ocp, &traj), &costs, exec)?;
    let h = tighten(&response, &qp);
    for (s, hk) in qp.stages.iter_mut().zip(&h.stage) {
        s.bound -= hk;
    }
    qp.terminal.bound -= &h.terminal;

    let out = crate::admm::solve_qp(&qp, &settings.sqp.admm, warm, exec)?;
    let (dx, du) = (&out.solution.dx, &out.solution.du);
    let plan = Trajectory {
        x: traj.x.iter().zip(dx).map(|(x, d)| x + d).collect(),
        u: traj.u.iter().zip(du).map(|(u, d)| u + d).collect(),
        dt: traj.dt,
    };
    let step = dx.iter().chain(du).fold(0.0f64, |m, v| m.max(v.amax()));
    let defect = qp.stages.iter().fold(0.0f64, |m, s| m.max(s.defect.amax()));
    let violation = ocp.violation(&traj, Some(&h)).max(0.0);
    let lambda = split_duals(&qp, &out.state.lambda);
    let next_tau = compute_duals(&lambda, &response, &qp, settings.epsilon).shifted();
    let stats = sqp::SqpStats {
        iterations: 1,
        qp_solves: 1,
        converged: step.max(defect).max(violation) <= settings.sqp.kkt_tol,
        admm_iterations: out.stats.iterations,
        admm_converged: out.stats.converged,
        kkt_residual: step.max(defect).max(violation),
        step_norm: step,
        defect,
        violation,
        scan_layers: out.stats.scan_layers,
    };
    Ok(RobustRtiStep {
        u0: plan.u[0].clone(),
        next_guess: plan.shifted(),
        next_duals: sqp::shift_duals(&out.state, &qp),
        plan,
        response,
        tightening: h,
        next_tau,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{normal_mat, random_ltv_qp};
    use crate::reference::fastsls_sequential;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn random_response(rng: &mut ChaCha8Rng, n: usize, nx: usize, nu: usize) -> SlsResponse {
        SlsResponse {
            phi_x: (0..n).map(|j| (0..n - j).map(|_| normal_mat(rng, nx, nx)).collect()).collect(),
            phi_u: (0..n).map(|j| (0..n - j - 1).map(|_| normal_mat(rng, nu, nx)).collect()).collect(),
            gains: (0..n).map(|j| vec![Mat::zeros(nu, nx); n - j - 1]).collect(),
        }
    }

    #[test]
    fn zero_response_duals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let qp = random_ltv_qp(&mut rng, 3, 2, 2, 5);
        let lambda: Vec<Vector> = (0..=5).map(|_| Vector::from_vec(vec![2.0, -1.0])).collect();
        let d = compute_duals(&lambda, &SlsResponse::zeros(5, 3, 2), &qp, 1e-8);
        for j in 0..5 {
            for t in &d.tau[j] {
                assert_eq!(t[0], 2.0 / 1e-8f64.sqrt());
                assert_eq!(t[1], 0.0);
            }
        }
        let zero = compute_duals(&vec![Vector::zeros(2); 6], &random_response(&mut rng, 5, 3, 2), &qp, 1e-8);
        assert!(zero.tau.iter().flatten().all(|t| t.amax() == 0.0));
    }

    #[test]
    fn beta_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let qp = random_ltv_qp(&mut rng, 3, 2, 1, 4);
        let phi = random_response(&mut rng, 4, 3, 2);
        let lambda: Vec<Vector> = (0..=4).map(|_| Vector::from_element(1, 1.0)).collect();
        let d = compute_duals(&lambda, &phi, &qp, 1e-8);
        for j in 0..4 {
            for k in j + 1..4 {
                let s = &qp.stages[k];
                let (x, u) = (phi.phi_x(k, j).unwrap(), phi.phi_u(k, j).unwrap());
                let mut sq = 0.0;
                for col in 0..3 {
                    let mut v = 0.0;
                    for i in 0..3 {
                        v += s.c[(0, i)] * x[(i, col)];
                    }
                    for i in 0..2 {
                        v += s.d[(0, i)] * u[(i, col)];
                    }
                    sq += v * v;
                }
                assert!((d.beta[j][k - j - 1][0] - sq).abs() <= 1e-12 * (1.0 + sq));
            }
        }
    }

    #[test]
    fn scalar_cost_blocks() {
        let mut st = Stage::new(scalar(1.0), scalar(1.0), scalar(1.0), scalar(1.0));
        st.c = scalar(1.0);
        st.d = scalar(1.0);
        st.bound = Vector::zeros(1);
        let qp = LtvQp { stages: vec![st.clone(), st], terminal: Terminal::new(scalar(1.0)), dx0: Vector::zeros(1) };
        let mut duals = SlsDuals::zeros(&qp);
        duals.tau[0][0] = Vector::from_element(1, 4.0);
        let costs = assemble_costs(&duals, &qp, &SlsWeights::identity(1, 1));
        let b = costs.stage(1, 0);
        assert_eq!((b.qx[(0, 0)], b.qu[(0, 0)], b.qxu[(0, 0)]), (5.0, 5.0, 4.0));
    }

    #[test]
    fn zero_tau_gives_plain_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qp = random_ltv_qp(&mut rng, 3, 2, 2, 4);
        let w = SlsWeights::identity(3, 2);
        let costs = assemble_costs(&SlsDuals::zeros(&qp), &qp, &w);
        for j in 0..4 {
            for k in j + 1..4 {
                let b = costs.stage(k, j);
                assert_eq!(b.qx, w.q);
                assert_eq!(b.qu, w.r);
                assert_eq!(b.qxu, Mat::zeros(3, 2));
            }
            assert_eq!(costs.terminal(j), &w.q_terminal);
        }
    }

    #[test]
    fn blocks_match_dense_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qp = random_ltv_qp(&mut rng, 3, 2, 2, 3);
        let mut duals = SlsDuals::zeros(&qp);
        for t in duals.tau.iter_mut().flatten() {
            *t = t.map(|_| rand::Rng::random_range(&mut rng, 0.0..3.0));
        }
        let w = SlsWeights::identity(3, 2);
        let costs = assemble_costs(&duals, &qp, &w);
        let (k, j) = (2, 0);
        let s = &qp.stages[k];
        let tau = &duals.tau[j][k - j - 1];
        let mut cd = Mat::zeros(2, 5);
        cd.view_mut((0, 0), (2, 3)).copy_from(&s.c);
        cd.view_mut((0, 3), (2, 2)).copy_from(&s.d);
        let mut stacked = Mat::zeros(7, 5);
        for i in 0..2 {
            stacked.row_mut(i).copy_from(&(cd.row(i) * tau[i].sqrt()));
        }
        stacked.view_mut((2, 0), (3, 3)).copy_from(&Mat::identity(3, 3));
        stacked.view_mut((5, 3), (2, 2)).copy_from(&Mat::identity(2, 2));
        let gram = stacked.transpose() * stacked;
        let b = costs.stage(k, j);
        assert!((gram.view((0, 0), (3, 3)) - &b.qx).amax() <= 1e-12);
        assert!((gram.view((3, 3), (2, 2)) - &b.qu).amax() <= 1e-12);
        assert!((gram.view((0, 3), (3, 2)) - &b.qxu).amax() <= 1e-12);
    }

    #[test]
    fn synthesize_matches_sequential_and_boundary_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qp = random_ltv_qp(&mut rng, 4, 2, 2, 12);
        let e: Vec<Mat> = (0..12).map(|_| normal_mat(&mut rng, 4, 4) * 0.1).collect();
        let mut duals = SlsDuals::zeros(&qp);
        for t in duals.tau.iter_mut().flatten() {
            *t = t.map(|_| rand::Rng::random_range(&mut rng, 0.0..2.0));
        }
        let costs = assemble_costs(&duals, &qp, &SlsWeights::identity(4, 2));
        let par = synthesize(&qp, &e, &costs, &Executor::Sequential).unwrap();
        let seq = fastsls_sequential(&qp, &e, &costs).unwrap();
        for j in 0..12 {
            assert_eq!(par.phi_x(j + 1, j).unwrap(), &e[j]);
            for k in j + 1..=12 {
                let (a, b) = (par.phi_x(k, j).unwrap(), seq.phi_x(k, j).unwrap());
                assert!((a - b).amax() <= 1e-8 * (1.0 + b.amax()));
            }
        }
        assert!(par.dynamics_residual(&qp) <= 1e-8);
        assert!(par.phi_u(12, 11).is_none());

        let zero: Vec<Mat> = vec![Mat::zeros(4, 4); 12];
        let z = synthesize(&qp, &zero, &costs, &Executor::Sequential).unwrap();
        assert_eq!(tighten(&z, &qp), Tightening::zeros(&qp));
    }

    #[test]
    fn hand_computed_two_stage_response() {
        let one = scalar(1.0);
        let qp = LtvQp {
            stages: vec![Stage::new(one.clone(), one.clone(), one.clone(), one.clone()); 2],
            terminal: Terminal::new(one.clone()),
            dx0: Vector::zeros(1),
        };
        let costs = assemble_costs(&SlsDuals::zeros(&qp), &qp, &SlsWeights::identity(1, 1));
        let phi = synthesize(&qp, &[one.clone(), one.clone()], &costs, &Executor::Sequential).unwrap();
        assert!((phi.gain(1, 0).unwrap()[(0, 0)] + 0.5).abs() <= 1e-15);
        assert!((phi.phi_x(2, 0).unwrap()[(0, 0)] - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn tightening_matches_triple_loop_and_scales_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let qp = random_ltv_qp(&mut rng, 3, 2, 2, 6);
        let phi = random_response(&mut rng, 6, 3, 2);
        let h = tighten(&phi, &qp);
        for k in 1..6 {
            let s = &qp.stages[k];
            for row in 0..2 {
                let mut total = 0.0;
                for j in 0..k {
                    let (x, u) = (phi.phi_x(k, j).unwrap(), phi.phi_u(k, j).unwrap());
                    let mut sq = 0.0;
                    for col in 0..3 {
                        let mut v = 0.0;
                        for i in 0..3 {
                            v += s.c[(row, i)] * x[(i, col)];
                        }
                        for i in 0..2 {
                            v += s.d[(row, i)] * u[(i, col)];
                        }
                        sq += v * v;
                    }
                    total += sq.sqrt();
                }
                assert!((h.stage[k][row] - total).abs() <= 1e-12 * (1.0 + total));
            }
        }
        assert_eq!(h.stage[0], Vector::zeros(2));

        let e: Vec<Mat> = (0..6).map(|_| normal_mat(&mut rng, 3, 3)).collect();
        let costs = assemble_costs(&SlsDuals::zeros(&qp), &qp, &SlsWeights::identity(3, 2));
        let base = tighten(&synthesize(&qp, &e, &costs, &Executor::Sequential).unwrap(), &qp);
        let e3: Vec<Mat> = e.iter().map(|m| m * 3.0).collect();
        let scaled = tighten(&synthesize(&qp, &e3, &costs, &Executor::Sequential).unwrap(), &qp);
        for (a, b) in base.stage.iter().zip(&scaled.stage) {
            assert!((a * 3.0 - b).amax() <= 1e-10 * (1.0 + b.amax()));
        }
    }

    #[test]
    fn sls_cost_examples() {
        let w = SlsWeights::identity(1, 1);
        assert_eq!(sls_cost(&SlsResponse::zeros(3, 1, 1), &w), 0.0);
        let mut phi = SlsResponse::zeros(1, 1, 1);
        phi.phi_x[0][0] = scalar(2.0);
        assert_eq!(sls_cost(&phi, &w), 4.0);
    }

    #[test]
    fn sls_cost_matches_trace_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let phi = random_response(&mut rng, 5, 3, 2);
        let q = crate::fixtures::random_spd(&mut rng, 3, 0.5);
        let r = crate::fixtures::random_spd(&mut rng, 2, 0.5);
        let qn = crate::fixtures::random_spd(&mut rng, 3, 0.5);
        let w = SlsWeights { q: q.clone(), r: r.clone(), q_terminal: qn.clone() };
        let mut expected = 0.0;
        for j in 0..5 {
            for k in j + 1..5 {
                let x = phi.phi_x(k, j).unwrap();
                let u = phi.phi_u(k, j).unwrap();
                expected += (x.transpose() * &q * x).trace() + (u.transpose() * &r * u).trace();
            }
            let x = phi.phi_x(5, j).unwrap();
            expected += (x.transpose() * &qn * x).trace();
        }
        assert!((sls_cost(&phi, &w) - expected).abs() <= 1e-10 * (1.0 + expected));
    }

    #[test]
    fn shifted_duals_keep_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let qp = random_ltv_qp(&mut rng, 3, 2, 2, 5);
        let mut d = SlsDuals::zeros(&qp);
        for (j, row) in d.tau.iter_mut().enumerate() {
            for (i, t) in row.iter_mut().enumerate() {
                t.fill((10 * j + i) as f64);
            }
        }
        let s = d.shifted();
        for j in 0..5 {
            assert_eq!(s.tau[j].len(), 5 - j);
            for (a, b) in s.tau[j].iter().zip(&d.tau[j]) {
                assert_eq!(a.len(), b.len());
            }
        }
        // (k, j) = (3, 1) comes from (4, 2).
        assert_eq!(s.tau[1][1][0], d.tau[2][1][0]);
    }
}
