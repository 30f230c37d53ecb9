//! Independent sequential oracles.
//!
//! Nothing here uses the scan machinery or the scan element types; the
//! oracles are plain textbook recursions and a dense interior-point solver.

use nalgebra::{Cholesky, LU};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::lqr::{LqrSolution, LtvQp};
use crate::sls::{SlsCosts, SlsResponse};

/// Worst blockwise error between an implementation and an oracle.
///
/// The relative error of a block is `‖a - b‖_max / max(‖b‖_max, 1e-14)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub oracle: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst: String,
}

impl OracleReport {
    pub fn new(oracle: impl Into<String>) -> Self {
        OracleReport { oracle: oracle.into(), max_rel: 0.0, max_abs: 0.0, worst: String::new() }
    }

    pub fn check_mat(&mut self, label: impl Fn() -> String, got: &Mat, expected: &Mat) {
        let abs = if got.shape() == expected.shape() {
            got.iter().zip(expected.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        } else {
            f64::INFINITY
        };
        let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-14);
        let rel = abs / scale;
        if !(rel <= self.max_rel) {
            self.worst = label();
        }
        self.max_rel = self.max_rel.max(if rel.is_nan() { f64::INFINITY } else { rel });
        self.max_abs = self.max_abs.max(if abs.is_nan() { f64::INFINITY } else { abs });
    }

    pub fn check_vec(&mut self, label: impl Fn() -> String, got: &Vector, expected: &Vector) {
        let g = Mat::from_column_slice(got.len(), 1, got.as_slice());
        let e = Mat::from_column_slice(expected.len(), 1, expected.as_slice());
        self.check_mat(label, &g, &e);
    }

    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel <= rel_tol
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel {:.3e}, max abs {:.3e}{}",
            self.oracle,
            self.max_rel,
            self.max_abs,
            if self.worst.is_empty() { String::new() } else { format!(" at {}", self.worst) }
        )
    }
}

/// Compares every trajectory, gain and feedforward of two LQR solutions.
pub fn compare_lqr(name: &str, got: &LqrSolution, expected: &LqrSolution) -> OracleReport {
    let mut rep = OracleReport::new(name);
    for (k, (a, b)) in got.dx.iter().zip(&expected.dx).enumerate() {
        rep.check_vec(|| format!("dx[{k}]"), a, b);
    }
    for (k, (a, b)) in got.du.iter().zip(&expected.du).enumerate() {
        rep.check_vec(|| format!("du[{k}]"), a, b);
    }
    for (k, (a, b)) in got.gains.iter().zip(&expected.gains).enumerate() {
        rep.check_mat(|| format!("K[{k}]"), a, b);
    }
    if got.dx.len() != expected.dx.len() || got.gains.len() != expected.gains.len() {
        rep.max_rel = f64::INFINITY;
        rep.worst = "horizon mismatch".into();
    }
    rep
}

fn spd_solve(m: &Mat, rhs: &Mat, what: impl Fn() -> String) -> Result<Mat> {
    Cholesky::new(m.clone()).map(|c| c.solve(rhs)).ok_or_else(|| Error::Oracle(what()))
}

/// Backward Riccati recursion and forward rollout.
pub fn riccati_lqr(qp: &LtvQp) -> Result<LqrSolution> {
    let n = qp.horizon();
    let mut p = vec![Mat::zeros(0, 0); n + 1];
    let mut p_lin = vec![Vector::zeros(0); n + 1];
    let mut gains = vec![Mat::zeros(0, 0); n];
    let mut feedforward = vec![Vector::zeros(0); n];
    p[n] = qp.terminal.q.clone();
    p_lin[n] = qp.terminal.q_lin.clone();
    for k in (0..n).rev() {
        let s = &qp.stages[k];
        let (pn, pl) = (p[k + 1].clone(), p_lin[k + 1].clone());
        let (pn, pl) = (&pn, &pl);
        let huu = &s.r + s.b.transpose() * pn * &s.b;
        let hux = &s.s + s.b.transpose() * pn * &s.a;
        let hu = &s.r_lin + s.b.transpose() * (pl + pn * &s.defect);
        let nu = s.b.ncols();
        let mut rhs = Mat::zeros(nu, s.a.ncols() + 1);
        rhs.columns_mut(0, s.a.ncols()).copy_from(&hux);
        rhs.column_mut(s.a.ncols()).copy_from(&hu);
        let sol = spd_solve(&huu, &rhs, || format!("singular innovation at stage {k}"))?;
        let gain = -sol.columns(0, s.a.ncols()).into_owned();
        let ff: Vector = -sol.column(s.a.ncols()).into_owned();
        let pk = &s.q + s.a.transpose() * pn * &s.a + hux.transpose() * &gain;
        p[k] = (&pk + pk.transpose()) * 0.5;
        p_lin[k] = &s.q_lin + s.a.transpose() * (pl + pn * &s.defect) + hux.transpose() * &ff;
        gains[k] = gain;
        feedforward[k] = ff;
    }
    let mut dx = vec![qp.dx0.clone()];
    let mut du = Vec::with_capacity(n);
    for k in 0..n {
        let s = &qp.stages[k];
        let u = &gains[k] * &dx[k] + &feedforward[k];
        dx.push(&s.a * &dx[k] + &s.b * &u + &s.defect);
        du.push(u);
    }
    Ok(LqrSolution { dx, du, gains, feedforward, p, p_lin, value_layers: 0, trajectory_layers: 0 })
}

/// Per-disturbance Riccati recursions and forward propagations, one loop
/// each, over the stage data `(A_k, B_k)` of `qp` and injection maps `e`.
pub fn fastsls_sequential(qp: &LtvQp, e: &[Mat], costs: &SlsCosts) -> Result<SlsResponse> {
    let n = qp.horizon();
    let mut phi_x = Vec::with_capacity(n);
    let mut phi_u = Vec::with_capacity(n);
    let mut gains_all = Vec::with_capacity(n);
    for j in 0..n {
        // Stages j+1..N-1, terminal N.
        let mut pk = costs.terminal(j).clone();
        let mut gains = vec![Mat::zeros(0, 0); n - j - 1];
        for k in (j + 1..n).rev() {
            let s = &qp.stages[k];
            let block = costs.stage(k, j);
            let g_inv = &block.qu + s.b.transpose() * &pk * &s.b;
            let bk = block.qxu.transpose() + s.b.transpose() * &pk * &s.a;
            let gain = -spd_solve(&g_inv, &bk, || format!("singular synthesis Hessian at ({k}, {j})"))?;
            let next = &block.qx + s.a.transpose() * &pk * &s.a + gain.transpose() * &bk;
            pk = (&next + next.transpose()) * 0.5;
            gains[k - j - 1] = gain;
        }
        let mut xs = vec![e[j].clone()];
        let mut us = Vec::with_capacity(n - j - 1);
        for k in j + 1..n {
            let s = &qp.stages[k];
            let u = &gains[k - j - 1] * xs.last().unwrap();
            let x = &s.a * xs.last().unwrap() + &s.b * &u;
            us.push(u);
            xs.push(x);
        }
        phi_x.push(xs);
        phi_u.push(us);
        gains_all.push(gains);
    }
    Ok(SlsResponse::from_parts(phi_x, phi_u, gains_all))
}

/// `min ½xᵀHx + gᵀx  s.t.  A_in x ≤ b_in,  A_eq x = b_eq`.
#[derive(Clone, Debug)]
pub struct DenseQp {
    pub h: Mat,
    pub g: Vector,
    pub a_in: Mat,
    pub b_in: Vector,
    pub a_eq: Mat,
    pub b_eq: Vector,
}

#[derive(Clone, Debug)]
pub struct DenseQpSolution {
    pub x: Vector,
    pub objective: f64,
    /// Inequality multipliers, `≥ 0`.
    pub z: Vector,
    /// Equality multipliers.
    pub y: Vector,
    pub iterations: usize,
}

impl DenseQp {
    pub fn objective(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }
}

/// Mehrotra predictor-corrector interior-point solve.
pub fn dense_qp(qp: &DenseQp) -> Result<DenseQpSolution> {
    let nv = qp.h.nrows();
    let mi = qp.a_in.nrows();
    let me = qp.a_eq.nrows();
    let mut x = Vector::zeros(nv);
    let mut y = Vector::zeros(me);
    let mut s = (&qp.b_in - &qp.a_in * &x).map(|v| v.max(1.0));
    let mut z = Vector::from_element(mi, 1.0);
    let scale = 1.0 + qp.g.amax().max(qp.b_in.amax()).max(qp.b_eq.amax()).max(qp.h.amax());
    // Tighter targets stall on the ill-conditioned late-stage KKT systems.
    let tol = 1e-9 * scale;

    for it in 1..=200 {
        let r_d = &qp.h * &x + &qp.g + qp.a_eq.transpose() * &y + qp.a_in.transpose() * &z;
        let r_eq = &qp.a_eq * &x - &qp.b_eq;
        let r_in = &qp.a_in * &x + &s - &qp.b_in;
        let mu = if mi > 0 { s.dot(&z) / mi as f64 } else { 0.0 };
        let res = r_d.amax().max(r_eq.amax()).max(r_in.amax());
        if res <= tol && mu <= tol {
            return Ok(DenseQpSolution { objective: qp.objective(&x), x, z, y, iterations: it - 1 });
        }

        let w = z.component_div(&s);
        let mut kkt = Mat::zeros(nv + me, nv + me);
        let mut hh = qp.h.clone();
        for i in 0..mi {
            let row = qp.a_in.row(i);
            hh += row.transpose() * row * w[i];
        }
        kkt.view_mut((0, 0), (nv, nv)).copy_from(&hh);
        kkt.view_mut((0, nv), (nv, me)).copy_from(&qp.a_eq.transpose());
        kkt.view_mut((nv, 0), (me, nv)).copy_from(&qp.a_eq);
        let lu = LU::new(kkt);

        let direction = |r_c: &Vector| -> Result<(Vector, Vector, Vector, Vector)> {
            // Δz = S⁻¹(r_c + Z r_in) + W A_in Δx
            let t = (r_c + z.component_mul(&r_in)).component_div(&s);
            let mut rhs = Vector::zeros(nv + me);
            rhs.rows_mut(0, nv).copy_from(&(-&r_d - qp.a_in.transpose() * &t));
            rhs.rows_mut(nv, me).copy_from(&(-&r_eq));
            let sol = lu.solve(&rhs).ok_or_else(|| Error::Oracle("singular KKT system".into()))?;
            let dx = sol.rows(0, nv).into_owned();
            let dy = sol.rows(nv, me).into_owned();
            let dz = &t + w.component_mul(&(&qp.a_in * &dx));
            let ds = -&r_in - &qp.a_in * &dx;
            Ok((dx, dy, dz, ds))
        };
        let max_step = |v: &Vector, dv: &Vector| {
            v.iter().zip(dv.iter()).fold(1.0f64, |a, (vi, di)| if *di < 0.0 { a.min(-vi / di) } else { a })
        };

        let (_, _, dz_aff, ds_aff) = direction(&(-s.component_mul(&z)))?;
        let alpha_aff = max_step(&s, &ds_aff).min(max_step(&z, &dz_aff));
        let mu_aff = if mi > 0 {
            (&s + &ds_aff * alpha_aff).dot(&(&z + &dz_aff * alpha_aff)) / mi as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3) } else { 0.0 };
        let r_c = -s.component_mul(&z) - ds_aff.component_mul(&dz_aff) + Vector::from_element(mi, sigma * mu);
        let (dx, dy, dz, ds) = direction(&r_c)?;
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        x += &dx * alpha;
        y += &dy * alpha;
        z += &dz * alpha;
        s += &ds * alpha;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Oracle("interior-point iterate became non-finite".into()));
        }
    }
    Err(Error::Oracle("interior-point solver did not converge in 200 iterations".into()))
}

/// Stacks an LTV-QP over `[x_0, u_0, x_1, u_1, …, x_N]` with the dynamics
/// and the initial condition as equality rows.
pub fn flatten_qp(qp: &LtvQp) -> DenseQp {
    let (nx, nu, n) = (qp.nx(), qp.nu(), qp.horizon());
    let nv = n * (nx + nu) + nx;
    let xi = |k: usize| k * (nx + nu);
    let ui = |k: usize| k * (nx + nu) + nx;
    let mut h = Mat::zeros(nv, nv);
    let mut g = Vector::zeros(nv);
    let me = (n + 1) * nx;
    let mut a_eq = Mat::zeros(me, nv);
    let mut b_eq = Vector::zeros(me);
    let mi = qp.constraint_rows();
    let mut a_in = Mat::zeros(mi, nv);
    let b_in = qp.bounds();

    for r in 0..nx {
        a_eq[(r, r)] = 1.0;
    }
    b_eq.rows_mut(0, nx).copy_from(&qp.dx0);
    let mut row = 0;
    for (k, s) in qp.stages.iter().enumerate() {
        h.view_mut((xi(k), xi(k)), (nx, nx)).copy_from(&s.q);
        h.view_mut((ui(k), ui(k)), (nu, nu)).copy_from(&s.r);
        h.view_mut((ui(k), xi(k)), (nu, nx)).copy_from(&s.s);
        h.view_mut((xi(k), ui(k)), (nx, nu)).copy_from(&s.s.transpose());
        g.rows_mut(xi(k), nx).copy_from(&s.q_lin);
        g.rows_mut(ui(k), nu).copy_from(&s.r_lin);

        let er = (k + 1) * nx;
        a_eq.view_mut((er, xi(k + 1)), (nx, nx)).copy_from(&Mat::identity(nx, nx));
        a_eq.view_mut((er, xi(k)), (nx, nx)).copy_from(&(-&s.a));
        a_eq.view_mut((er, ui(k)), (nx, nu)).copy_from(&(-&s.b));
        b_eq.rows_mut(er, nx).copy_from(&s.defect);

        let nc = s.nc();
        a_in.view_mut((row, xi(k)), (nc, nx)).copy_from(&s.c);
        a_in.view_mut((row, ui(k)), (nc, nu)).copy_from(&s.d);
        row += nc;
    }
    h.view_mut((xi(n), xi(n)), (nx, nx)).copy_from(&qp.terminal.q);
    g.rows_mut(xi(n), nx).copy_from(&qp.terminal.q_lin);
    a_in.view_mut((row, xi(n)), (qp.terminal.nf(), nx)).copy_from(&qp.terminal.c);
    DenseQp { h, g, a_in, b_in, a_eq, b_eq }
}

/// Splits a flattened solution back into `(δx, δu)`.
pub fn unflatten(qp: &LtvQp, x: &Vector) -> (Vec<Vector>, Vec<Vector>) {
    let (nx, nu, n) = (qp.nx(), qp.nu(), qp.horizon());
    let dx = (0..=n).map(|k| x.rows(k * (nx + nu), nx).into_owned()).collect();
    let du = (0..n).map(|k| x.rows(k * (nx + nu) + nx, nu).into_owned()).collect();
    (dx, du)
}

/// Central-difference Jacobian of `f` at `x`.
pub fn finite_diff(f: impl Fn(&Vector) -> Vector, x: &Vector, step: f64) -> Mat {
    let m = f(x).len();
    let mut jac = Mat::zeros(m, x.len());
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += step;
        xm[i] -= step;
        jac.set_column(i, &((f(&xp) - f(&xm)) / (2.0 * step)));
    }
    jac
}

/// Explicit Euler integration of `ẋ = f(x)` over `dt` with `substeps` steps.
pub fn fine_euler(f: impl Fn(&Vector) -> Vector, x: &Vector, dt: f64, substeps: usize) -> Vector {
    let h = dt / substeps as f64;
    let mut x = x.clone();
    for _ in 0..substeps {
        x = &x + f(&x) * h;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::{Stage, Terminal};

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn scalar_one_step() {
        let qp = LtvQp {
            stages: vec![Stage::new(scalar(1.0), scalar(1.0), scalar(1.0), scalar(1.0))],
            terminal: Terminal::new(scalar(1.0)),
            dx0: Vector::from_element(1, 1.0),
        };
        let sol = riccati_lqr(&qp).unwrap();
        assert!((sol.du[0][0] + 0.5).abs() <= 1e-15);
    }

    #[test]
    fn long_horizon_reaches_riccati_fixed_point() {
        let n = 500;
        let qp = LtvQp {
            stages: (0..n).map(|_| Stage::new(scalar(1.2), scalar(1.0), scalar(1.0), scalar(1.0))).collect(),
            terminal: Terminal::new(scalar(1.0)),
            dx0: Vector::from_element(1, 1.0),
        };
        let sol = riccati_lqr(&qp).unwrap();
        assert!((sol.p[0][(0, 0)] - sol.p[1][(0, 0)]).abs() <= 1e-6);
        // Scalar DARE: P = q + a²P - a²P²/(r + P)
        let p = sol.p[0][(0, 0)];
        assert!((p - (1.0 + 1.44 * p - 1.44 * p * p / (1.0 + p))).abs() <= 1e-9);
    }

    #[test]
    fn dense_unconstrained() {
        let h = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = Vector::from_vec(vec![1.0, -1.0]);
        let qp = DenseQp {
            h: h.clone(),
            g: g.clone(),
            a_in: Mat::zeros(0, 2),
            b_in: Vector::zeros(0),
            a_eq: Mat::zeros(0, 2),
            b_eq: Vector::zeros(0),
        };
        let sol = dense_qp(&qp).unwrap();
        let expected = -h.try_inverse().unwrap() * g;
        assert!((sol.x - expected).amax() <= 1e-9);
    }

    #[test]
    fn dense_scalar_active_bound() {
        let qp = DenseQp {
            h: scalar(1.0),
            g: Vector::zeros(1),
            a_in: scalar(-1.0),
            b_in: Vector::from_element(1, -1.0),
            a_eq: Mat::zeros(0, 1),
            b_eq: Vector::zeros(0),
        };
        let sol = dense_qp(&qp).unwrap();
        assert!((sol.x[0] - 1.0).abs() <= 1e-8);
        assert!((sol.z[0] - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let f = |x: &Vector| Vector::from_vec(vec![x[0] * x[0], x[0] * x[1]]);
        let jac = finite_diff(f, &Vector::from_vec(vec![2.0, 3.0]), 1e-5);
        let expected = Mat::from_row_slice(2, 2, &[4.0, 0.0, 3.0, 2.0]);
        assert!((jac - expected).amax() <= 1e-8);
    }

    #[test]
    fn fine_euler_exponential() {
        let x = fine_euler(|x| x.clone(), &Vector::from_element(1, 1.0), 1.0, 100_000);
        assert!((x[0] - std::f64::consts::E).abs() <= 1e-4);
    }
}
