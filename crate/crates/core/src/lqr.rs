//! Equality-constrained LQR via associative scans.
//!
//! The backward Riccati recursion is replaced by a reverse scan over
//! conditional value functions ([`CvfElement`]): the suffix reduction starting
//! at stage `i` is the exact cost-to-go, so `P_i`, `p_i` are read off the scan
//! output. The forward rollout is a second, forward scan over affine
//! closed-loop maps ([`CotElement`]).
//!
//! Between penalty updates inside ADMM only the linear cost terms change.
//! [`build_cache`] records every quadratic intermediate of the full solve (per
//! tree node and per stage) and [`solve_cached`] replays the scans on the
//! linear parts alone, reusing those factors. Because both paths run the
//! same tree and the same arithmetic helpers, their outputs are bitwise equal.

use crate::error::{Error, Result};
use crate::linalg::{all_finite, symmetrize, CheckedLu, Mat, SpdFactor, Vector};
use crate::scan::{node_scan, traced_scan, try_inclusive_scan, Direction, Executor, NodeId, ScanTrace};

/// One stage of the linear time-varying QP.
///
/// Dynamics `δx⁺ = A δx + B δu + defect`, cost
/// `½[δx;δu]ᵀ[[Q,Sᵀ],[S,R]][δx;δu] + q_linᵀδx + r_linᵀδu`,
/// constraints `C δx + D δu ≤ bound`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub a: Mat,
    pub b: Mat,
    pub defect: Vector,
    pub q: Mat,
    pub r: Mat,
    /// Cross term, `n_u × n_x`.
    pub s: Mat,
    pub q_lin: Vector,
    pub r_lin: Vector,
    pub c: Mat,
    pub d: Mat,
    pub bound: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Terminal {
    pub q: Mat,
    pub q_lin: Vector,
    pub c: Mat,
    pub bound: Vector,
}

/// Structured LQR/QP data over a horizon of `stages.len()` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LtvQp {
    pub stages: Vec<Stage>,
    pub terminal: Terminal,
    /// Initial state offset `δx₀`.
    pub dx0: Vector,
}

impl Stage {
    /// Unconstrained stage with zero linear terms.
    pub fn new(a: Mat, b: Mat, q: Mat, r: Mat) -> Self {
        let (nx, nu) = (a.nrows(), b.ncols());
        Stage {
            a,
            b,
            defect: Vector::zeros(nx),
            q,
            r,
            s: Mat::zeros(nu, nx),
            q_lin: Vector::zeros(nx),
            r_lin: Vector::zeros(nu),
            c: Mat::zeros(0, nx),
            d: Mat::zeros(0, nu),
            bound: Vector::zeros(0),
        }
    }

    pub fn nc(&self) -> usize {
        self.c.nrows()
    }
}

impl Terminal {
    pub fn new(q: Mat) -> Self {
        let nx = q.nrows();
        Terminal { q, q_lin: Vector::zeros(nx), c: Mat::zeros(0, nx), bound: Vector::zeros(0) }
    }

    pub fn nf(&self) -> usize {
        self.c.nrows()
    }
}

impl LtvQp {
    pub fn nx(&self) -> usize {
        self.dx0.len()
    }

    pub fn nu(&self) -> usize {
        self.stages.first().map(|s| s.b.ncols()).unwrap_or(0)
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    /// Total number of inequality rows (stages then terminal).
    pub fn constraint_rows(&self) -> usize {
        self.stages.iter().map(Stage::nc).sum::<usize>() + self.terminal.nf()
    }

    /// Row offset of each stage's constraints in the stacked vector; the last
    /// entry is the terminal offset.
    pub fn row_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.stages.len() + 1);
        let mut acc = 0;
        for s in &self.stages {
            offsets.push(acc);
            acc += s.nc();
        }
        offsets.push(acc);
        offsets
    }

    pub fn validate(&self) -> Result<()> {
        let nx = self.nx();
        let nu = self.nu();
        let dim = |what: &str, k: usize| Error::Dimension(format!("{what} at stage {k}"));
        let symmetric = |m: &Mat| {
            let scale = 1.0 + m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            (m - m.transpose()).iter().all(|v| v.abs() <= 1e-9 * scale)
        };
        for (k, s) in self.stages.iter().enumerate() {
            if s.a.shape() != (nx, nx) || s.b.shape() != (nx, nu) || s.defect.len() != nx {
                return Err(dim("dynamics shape", k));
            }
            if s.q.shape() != (nx, nx) || s.r.shape() != (nu, nu) || s.s.shape() != (nu, nx) {
                return Err(dim("cost shape", k));
            }
            if s.q_lin.len() != nx || s.r_lin.len() != nu {
                return Err(dim("linear cost length", k));
            }
            let nc = s.c.nrows();
            if s.c.ncols() != nx || s.d.shape() != (nc, nu) || s.bound.len() != nc {
                return Err(dim("constraint shape", k));
            }
            if !symmetric(&s.q) || !symmetric(&s.r) {
                return Err(dim("asymmetric cost Hessian", k));
            }
        }
        let t = &self.terminal;
        let n = self.stages.len();
        if t.q.shape() != (nx, nx) || t.q_lin.len() != nx || t.c.ncols() != nx || t.bound.len() != t.c.nrows() {
            return Err(dim("terminal shape", n));
        }
        if !symmetric(&t.q) {
            return Err(dim("asymmetric terminal Hessian", n));
        }
        Ok(())
    }

    /// Stacked constraint map `G(δx, δu)`.
    pub fn constraint_values(&self, dx: &[Vector], du: &[Vector]) -> Vector {
        let mut out = Vector::zeros(self.constraint_rows());
        let mut row = 0;
        for (k, s) in self.stages.iter().enumerate() {
            let nc = s.nc();
            if nc > 0 {
                let v = &s.c * &dx[k] + &s.d * &du[k];
                out.rows_mut(row, nc).copy_from(&v);
            }
            row += nc;
        }
        let nf = self.terminal.nf();
        if nf > 0 {
            let v = &self.terminal.c * &dx[self.stages.len()];
            out.rows_mut(row, nf).copy_from(&v);
        }
        out
    }

    /// Stacked right-hand sides `f`.
    pub fn bounds(&self) -> Vector {
        let mut out = Vector::zeros(self.constraint_rows());
        let mut row = 0;
        for s in &self.stages {
            out.rows_mut(row, s.nc()).copy_from(&s.bound);
            row += s.nc();
        }
        out.rows_mut(row, self.terminal.nf()).copy_from(&self.terminal.bound);
        out
    }

    /// QP objective at `(δx, δu)`.
    pub fn objective(&self, dx: &[Vector], du: &[Vector]) -> f64 {
        let mut j = 0.0;
        for (k, s) in self.stages.iter().enumerate() {
            let (x, u) = (&dx[k], &du[k]);
            j += 0.5 * x.dot(&(&s.q * x)) + 0.5 * u.dot(&(&s.r * u)) + u.dot(&(&s.s * x));
            j += s.q_lin.dot(x) + s.r_lin.dot(u);
        }
        let x = &dx[self.stages.len()];
        j + 0.5 * x.dot(&(&self.terminal.q * x)) + self.terminal.q_lin.dot(x)
    }

    /// Largest per-stage violation of the linear dynamics.
    pub fn dynamics_residual(&self, dx: &[Vector], du: &[Vector]) -> f64 {
        let mut worst = (&dx[0] - &self.dx0).amax();
        for (k, s) in self.stages.iter().enumerate() {
            let r = &dx[k + 1] - (&s.a * &dx[k] + &s.b * &du[k] + &s.defect);
            worst = worst.max(r.amax());
        }
        worst
    }
}

/// Conditional value function between two boundary states.
#[derive(Clone, Debug, PartialEq)]
pub struct CvfElement {
    pub p: Mat,
    pub p_lin: Vector,
    pub a: Mat,
    pub c: Mat,
    pub b: Vector,
}

impl CvfElement {
    /// Two-sided neutral element `(0, 0, I, 0, 0)`.
    pub fn neutral(nx: usize) -> Self {
        CvfElement {
            p: Mat::zeros(nx, nx),
            p_lin: Vector::zeros(nx),
            a: Mat::identity(nx, nx),
            c: Mat::zeros(nx, nx),
            b: Vector::zeros(nx),
        }
    }
}

/// Conditional optimal trajectory: the affine map `δx_i ↦ A δx_i + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct CotElement {
    pub a: Mat,
    pub b: Vector,
}

/// Per-stage quantities from the elimination of `δu` in the initial elements.
#[derive(Clone, Debug)]
pub struct StageFactor {
    r_hat: SpdFactor,
    /// `R̂⁻¹ r̂`
    pub omega: Vector,
}

impl StageFactor {
    pub fn regularized(&self) -> bool {
        self.r_hat.regularized
    }
}

/// The ρ-invariant intermediates of one combine.
#[derive(Clone, Debug)]
pub struct CombineFactors {
    upsilon: Mat,
    psi: Mat,
    p_right: Mat,
    c_left: Mat,
}

#[derive(Clone, Debug, PartialEq)]
struct LinearPart {
    p_lin: Vector,
    b: Vector,
}

fn linear_init(stage: &Stage, r_hat: &SpdFactor) -> (LinearPart, Vector) {
    let omega = r_hat.solve_vec(&stage.r_lin);
    let mut p_lin = stage.q_lin.clone();
    p_lin.gemv_tr(-1.0, &stage.s, &omega, 1.0);
    let mut b = stage.defect.clone();
    b.gemv(-1.0, &stage.b, &omega, 1.0);
    (LinearPart { p_lin, b }, omega)
}

fn terminal_linear(t: &Terminal) -> LinearPart {
    LinearPart { p_lin: t.q_lin.clone(), b: Vector::zeros(t.q.nrows()) }
}

/// Builds the `N + 1` scan leaves: one per stage with `δu` eliminated, then
/// the terminal element with `Ã = C̃ = 0`.
pub fn init_elements(qp: &LtvQp) -> Result<(Vec<CvfElement>, Vec<StageFactor>)> {
    let nx = qp.nx();
    let mut elements = Vec::with_capacity(qp.horizon() + 1);
    let mut factors = Vec::with_capacity(qp.horizon());
    for (k, stage) in qp.stages.iter().enumerate() {
        let r_hat = SpdFactor::new(&stage.r).ok_or(Error::SingularStage { stage: k })?;
        let r_inv_s = r_hat.solve(&stage.s);
        let r_inv_bt = r_hat.solve(&stage.b.transpose());
        let (lin, omega) = linear_init(stage, &r_hat);
        elements.push(CvfElement {
            p: symmetrize(&(&stage.q - stage.s.transpose() * &r_inv_s)),
            p_lin: lin.p_lin,
            a: &stage.a - &stage.b * &r_inv_s,
            c: symmetrize(&(&stage.b * &r_inv_bt)),
            b: lin.b,
        });
        factors.push(StageFactor { r_hat, omega });
    }
    let lin = terminal_linear(&qp.terminal);
    elements.push(CvfElement {
        p: qp.terminal.q.clone(),
        p_lin: lin.p_lin,
        a: Mat::zeros(nx, nx),
        c: Mat::zeros(nx, nx),
        b: lin.b,
    });
    Ok((elements, factors))
}

fn combine_linear(f: &CombineFactors, left: &LinearPart, right: &LinearPart) -> LinearPart {
    let mut t = right.p_lin.clone();
    t.gemv(1.0, &f.p_right, &left.b, 1.0);
    let mut p_lin = left.p_lin.clone();
    p_lin.gemv(1.0, &f.upsilon, &t, 1.0);
    let mut s = left.b.clone();
    s.gemv(-1.0, &f.c_left, &right.p_lin, 1.0);
    let mut b = right.b.clone();
    b.gemv(1.0, &f.psi, &s, 1.0);
    LinearPart { p_lin, b }
}

fn combine_full(left: &CvfElement, right: &CvfElement) -> Result<(CvfElement, CombineFactors)> {
    let nx = left.p.nrows();
    let eye = Mat::identity(nx, nx);
    // Υ = Aₗᵀ (I + Pᵣ Cₗ)⁻¹  ⇔  Υᵀ = (I + Cₗ Pᵣ)⁻¹ Aₗ
    // Ψ = Aᵣ (I + Cₗ Pᵣ)⁻¹  ⇔  Ψᵀ = (I + Pᵣ Cₗ)⁻¹ Aᵣᵀ
    let pc = CheckedLu::new(&eye + &right.p * &left.c)?;
    let cp = CheckedLu::new(&eye + &left.c * &right.p)?;
    let upsilon = cp.solve(&left.a).transpose();
    let psi = pc.solve(&right.a.transpose()).transpose();

    let p = symmetrize(&(&upsilon * (&right.p * &left.a) + &left.p));
    let a = &psi * &left.a;
    let c = symmetrize(&(&psi * (&left.c * right.a.transpose()) + &right.c));
    let factors = CombineFactors { upsilon, psi, p_right: right.p.clone(), c_left: left.c.clone() };
    let lin = combine_linear(
        &factors,
        &LinearPart { p_lin: left.p_lin.clone(), b: left.b.clone() },
        &LinearPart { p_lin: right.p_lin.clone(), b: right.b.clone() },
    );
    if !(all_finite(&p) && all_finite(&a) && all_finite(&c)) {
        return Err(Error::IllConditionedCombine { rcond: 0.0 });
    }
    Ok((CvfElement { p, p_lin: lin.p_lin, a, c, b: lin.b }, factors))
}

/// `left ⊗ right`: merges the value function over `[i, k]` with that over
/// `[k, j]` into one over `[i, j]`.
pub fn combine_cvf(left: &CvfElement, right: &CvfElement) -> Result<CvfElement> {
    combine_full(left, right).map(|(e, _)| e)
}

/// `later ∘ earlier` for affine trajectory maps.
pub fn combine_cot(earlier: &CotElement, later: &CotElement) -> CotElement {
    CotElement { a: &later.a * &earlier.a, b: &later.a * &earlier.b + &later.b }
}

#[derive(Clone, Debug)]
struct GainCache {
    gain: Mat,
    gamma: SpdFactor,
}

fn stage_gain(stage: &Stage, p_next: &Mat, k: usize) -> Result<GainCache> {
    let bt_p = stage.b.transpose() * p_next;
    let gamma_inv = symmetrize(&(&stage.r + &bt_p * &stage.b));
    let gamma = SpdFactor::new(&gamma_inv).ok_or(Error::SingularStage { stage: k })?;
    let gain = -gamma.solve(&(&stage.s + &bt_p * &stage.a));
    Ok(GainCache { gain, gamma })
}

fn stage_feedforward(stage: &Stage, gamma: &SpdFactor, p_next: &Mat, p_lin_next: &Vector) -> Vector {
    let mut v = p_lin_next.clone();
    v.gemv(1.0, p_next, &stage.defect, 1.0);
    let mut rhs = stage.r_lin.clone();
    rhs.gemv_tr(1.0, &stage.b, &v, 1.0);
    -gamma.solve_vec(&rhs)
}

/// Solution of the equality-constrained LQR.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrSolution {
    pub dx: Vec<Vector>,
    pub du: Vec<Vector>,
    /// Feedback gains `K_k`.
    pub gains: Vec<Mat>,
    /// Feedforward terms `k_k`.
    pub feedforward: Vec<Vector>,
    /// Cost-to-go Hessians `P_0..P_N`.
    pub p: Vec<Mat>,
    /// Cost-to-go gradients `p_0..p_N`.
    pub p_lin: Vec<Vector>,
    /// Combine layers of the reverse value-function scan.
    pub value_layers: usize,
    /// Combine layers of the forward trajectory scan.
    pub trajectory_layers: usize,
}

impl LqrSolution {
    /// Deepest of the two scans executed.
    pub fn scan_layers(&self) -> usize {
        self.value_layers.max(self.trajectory_layers)
    }
}

fn closed_loop(qp: &LtvQp, gains: &[Mat]) -> Vec<Mat> {
    qp.stages.iter().zip(gains).map(|(s, k)| &s.a + &s.b * k).collect()
}

fn cot_elements(qp: &LtvQp, closed: &[Mat], feedforward: &[Vector], exec: &Executor) -> Vec<CotElement> {
    let nx = qp.nx();
    exec.map(qp.horizon(), |i| {
        let s = &qp.stages[i];
        let offset = &s.b * &feedforward[i] + &s.defect;
        if i == 0 {
            CotElement { a: Mat::zeros(nx, nx), b: &closed[0] * &qp.dx0 + offset }
        } else {
            CotElement { a: closed[i].clone(), b: offset }
        }
    })
}

/// Forward pass; the trace keeps the transition matrix of the later operand
/// at every node, which is all a replay needs.
fn rollout(
    qp: &LtvQp,
    gains: &[Mat],
    feedforward: &[Vector],
    exec: &Executor,
) -> Result<(Vec<Vector>, Vec<Vector>, usize, RolloutCache)> {
    let n = qp.horizon();
    let closed = closed_loop(qp, gains);
    let mut dx = Vec::with_capacity(n + 1);
    dx.push(qp.dx0.clone());
    if n == 0 {
        return Ok((dx, Vec::new(), 0, RolloutCache { closed, nodes: None }));
    }
    let elements = cot_elements(qp, &closed, feedforward, exec);
    let (scan, nodes) = traced_scan(
        elements,
        |_: NodeId, e: &CotElement, l: &CotElement| Ok((combine_cot(e, l), l.a.clone())),
        Direction::Forward,
        exec,
    )?;
    dx.extend(scan.values.into_iter().map(|e| e.b));
    let du = exec.map(n, |i| &gains[i] * &dx[i] + &feedforward[i]);
    Ok((dx, du, scan.layers, RolloutCache { closed, nodes: Some(nodes) }))
}

fn rollout_cached(
    qp: &LtvQp,
    cache: &RolloutCache,
    gains: &[Mat],
    feedforward: &[Vector],
    exec: &Executor,
) -> Result<(Vec<Vector>, Vec<Vector>, usize)> {
    let n = qp.horizon();
    let mut dx = Vec::with_capacity(n + 1);
    dx.push(qp.dx0.clone());
    let Some(nodes) = &cache.nodes else {
        return Ok((dx, Vec::new(), 0));
    };
    let offsets: Vec<Vector> = exec.map(n, |i| {
        let s = &qp.stages[i];
        let offset = &s.b * &feedforward[i] + &s.defect;
        if i == 0 {
            &cache.closed[0] * &qp.dx0 + offset
        } else {
            offset
        }
    });
    let scan = node_scan(
        offsets,
        |node, earlier: &Vector, later: &Vector| {
            let a = nodes
                .get(node)
                .ok_or_else(|| Error::Dimension(format!("cache has no transition for {node:?}")))?;
            Ok(a * earlier + later)
        },
        Direction::Forward,
        exec,
    )?;
    dx.extend(scan.values);
    let du = exec.map(n, |i| &gains[i] * &dx[i] + &feedforward[i]);
    Ok((dx, du, scan.layers))
}

#[derive(Clone, Debug)]
struct RolloutCache {
    closed: Vec<Mat>,
    nodes: Option<ScanTrace<Mat>>,
}

/// Riccati quantities from the reverse scan, before the forward rollout.
#[derive(Clone, Debug)]
pub struct ValuePass {
    pub p: Vec<Mat>,
    pub p_lin: Vec<Vector>,
    pub gains: Vec<Mat>,
    pub feedforward: Vec<Vector>,
    pub layers: usize,
}

/// Reverse value-function scan followed by gain recovery.
pub fn value_pass(qp: &LtvQp, exec: &Executor) -> Result<ValuePass> {
    let (elements, _) = init_elements(qp)?;
    let scan = try_inclusive_scan(elements, combine_cvf, Direction::Reverse, exec)?;
    let (p, p_lin): (Vec<Mat>, Vec<Vector>) = scan.values.into_iter().map(|e| (e.p, e.p_lin)).unzip();
    let n = qp.horizon();
    let per_stage = exec.try_map(n, |i| {
        let s = &qp.stages[i];
        let g = stage_gain(s, &p[i + 1], i)?;
        let ff = stage_feedforward(s, &g.gamma, &p[i + 1], &p_lin[i + 1]);
        Ok((g.gain, ff))
    })?;
    let (gains, feedforward) = per_stage.into_iter().unzip();
    Ok(ValuePass { p, p_lin, gains, feedforward, layers: scan.layers })
}

/// Full scan-based solve.
pub fn solve(qp: &LtvQp, exec: &Executor) -> Result<LqrSolution> {
    qp.validate()?;
    let vp = value_pass(qp, exec)?;
    let (dx, du, trajectory_layers, _) = rollout(qp, &vp.gains, &vp.feedforward, exec)?;
    Ok(LqrSolution {
        dx,
        du,
        gains: vp.gains,
        feedforward: vp.feedforward,
        p: vp.p,
        p_lin: vp.p_lin,
        value_layers: vp.layers,
        trajectory_layers,
    })
}

/// Factorizations reused while the quadratic data is unchanged.
#[derive(Clone, Debug)]
pub struct LqrCache {
    generation: u64,
    horizon: usize,
    nodes: ScanTrace<CombineFactors>,
    stages: Vec<StageFactor>,
    gains: Vec<GainCache>,
    p: Vec<Mat>,
    trajectory: RolloutCache,
}

impl LqrCache {
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Number of cached tree-node factor sets.
    pub fn cached_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Full solve that also records every quadratic intermediate, stamped with
/// `generation`.
pub fn build_cache(qp: &LtvQp, generation: u64, exec: &Executor) -> Result<(LqrCache, LqrSolution)> {
    qp.validate()?;
    let (elements, stages) = init_elements(qp)?;
    let (scan, nodes) = traced_scan(elements, |_: NodeId, l, r| combine_full(l, r), Direction::Reverse, exec)?;
    let (p, p_lin): (Vec<Mat>, Vec<Vector>) = scan.values.into_iter().map(|e| (e.p, e.p_lin)).unzip();
    let n = qp.horizon();
    let gains = exec.try_map(n, |i| stage_gain(&qp.stages[i], &p[i + 1], i))?;
    let feedforward: Vec<Vector> = exec.map(n, |i| {
        stage_feedforward(&qp.stages[i], &gains[i].gamma, &p[i + 1], &p_lin[i + 1])
    });
    let k: Vec<Mat> = gains.iter().map(|g| g.gain.clone()).collect();
    let (dx, du, trajectory_layers, trajectory) = rollout(qp, &k, &feedforward, exec)?;
    let solution = LqrSolution {
        dx,
        du,
        gains: k,
        feedforward,
        p: p.clone(),
        p_lin,
        value_layers: scan.layers,
        trajectory_layers,
    };
    let cache = LqrCache { generation, horizon: n, nodes, stages, gains, p, trajectory };
    Ok((cache, solution))
}

/// Solve reusing `cache`; only the linear terms `q_lin`, `r_lin` (and the
/// terminal `q_lin`) of `qp` may differ from the problem the cache was built
/// on. No factorization is performed.
pub fn solve_cached(qp: &LtvQp, cache: &LqrCache, generation: u64, exec: &Executor) -> Result<LqrSolution> {
    if cache.generation != generation {
        return Err(Error::CacheInvalidated { cached: cache.generation, current: generation });
    }
    if cache.horizon != qp.horizon() {
        return Err(Error::Dimension(format!(
            "cache horizon {} vs problem horizon {}",
            cache.horizon,
            qp.horizon()
        )));
    }
    let n = qp.horizon();
    let mut leaves: Vec<LinearPart> = exec.map(n, |i| linear_init(&qp.stages[i], &cache.stages[i].r_hat).0);
    leaves.push(terminal_linear(&qp.terminal));
    let scan = node_scan(
        leaves,
        |node, l, r| {
            let f = cache
                .nodes
                .get(node)
                .ok_or_else(|| Error::Dimension(format!("cache has no factors for {node:?}")))?;
            Ok(combine_linear(f, l, r))
        },
        Direction::Reverse,
        exec,
    )?;
    let p_lin: Vec<Vector> = scan.values.into_iter().map(|l| l.p_lin).collect();
    let feedforward: Vec<Vector> = exec.map(n, |i| {
        stage_feedforward(&qp.stages[i], &cache.gains[i].gamma, &cache.p[i + 1], &p_lin[i + 1])
    });
    let gains: Vec<Mat> = cache.gains.iter().map(|g| g.gain.clone()).collect();
    let (dx, du, trajectory_layers) = rollout_cached(qp, &cache.trajectory, &gains, &feedforward, exec)?;
    Ok(LqrSolution {
        dx,
        du,
        gains,
        feedforward,
        p: cache.p.clone(),
        p_lin,
        value_layers: scan.layers,
        trajectory_layers,
    })
}
