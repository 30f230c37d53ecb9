//! Seeded random problem generators for tests, examples and benchmarks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{symmetrize, Mat, Vector};
use crate::lqr::{CvfElement, LtvQp, Stage, Terminal};

pub fn normal_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn normal_vec<R: Rng>(rng: &mut R, len: usize) -> Vector {
    Vector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

/// `MᵀM/n + shift·I`
pub fn random_spd<R: Rng>(rng: &mut R, n: usize, shift: f64) -> Mat {
    let m = normal_mat(rng, n, n);
    symmetrize(&(m.transpose() * &m / n.max(1) as f64 + Mat::identity(n, n) * shift))
}

/// Random element with PSD `P̃`, `C̃` and a contractive `Ã`.
pub fn random_cvf<R: Rng>(rng: &mut R, nx: usize) -> CvfElement {
    CvfElement {
        p: random_spd(rng, nx, 0.1),
        p_lin: normal_vec(rng, nx),
        a: Mat::identity(nx, nx) * 0.5 + normal_mat(rng, nx, nx) * (0.3 / (nx as f64).sqrt()),
        c: random_spd(rng, nx, 0.1),
        b: normal_vec(rng, nx),
    }
}

/// Random strictly convex LTV-QP with `nc` rows per stage and `nc` terminal
/// rows. Constraint right-hand sides are offset from a random feasible
/// trajectory, so the feasible set always has an interior.
pub fn random_ltv_qp<R: Rng>(rng: &mut R, nx: usize, nu: usize, nc: usize, n: usize) -> LtvQp {
    let dx0 = normal_vec(rng, nx) * 0.5;
    let mut stages = Vec::with_capacity(n);
    let mut x = dx0.clone();
    for _ in 0..n {
        let a = Mat::identity(nx, nx) + normal_mat(rng, nx, nx) * (0.1 / (nx as f64).sqrt());
        let b = normal_mat(rng, nx, nu) * 0.5;
        let h = random_spd(rng, nx + nu, 0.05);
        let q = h.view((0, 0), (nx, nx)).into_owned();
        let s = h.view((nx, 0), (nu, nx)).into_owned();
        let r = symmetrize(&(h.view((nx, nx), (nu, nu)).into_owned() + Mat::identity(nu, nu) * 0.5));
        let mut stage = Stage::new(a, b, q, r);
        stage.s = s;
        stage.defect = normal_vec(rng, nx) * 0.1;
        stage.q_lin = normal_vec(rng, nx);
        stage.r_lin = normal_vec(rng, nu);
        let u = normal_vec(rng, nu) * 0.3;
        if nc > 0 {
            stage.c = normal_mat(rng, nc, nx);
            stage.d = normal_mat(rng, nc, nu);
            let slack = Vector::from_fn(nc, |_, _| rng.random_range(0.05..1.0));
            stage.bound = &stage.c * &x + &stage.d * &u + slack;
        }
        x = &stage.a * &x + &stage.b * &u + &stage.defect;
        stages.push(stage);
    }
    let mut terminal = Terminal::new(random_spd(rng, nx, 0.5));
    terminal.q_lin = normal_vec(rng, nx);
    if nc > 0 {
        terminal.c = normal_mat(rng, nc, nx);
        let slack = Vector::from_fn(nc, |_, _| rng.random_range(0.05..1.0));
        terminal.bound = &terminal.c * &x + slack;
    }
    LtvQp { stages, terminal, dx0 }
}
