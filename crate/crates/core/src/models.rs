//! Bundled dynamics models, constraint sets and tracking costs.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

/// Discrete-time dynamics `x⁺ = f(x, u) + E(x) w` with `‖w‖₂ ≤ 1`.
pub trait Model: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn dt(&self) -> f64;
    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector>;
    /// `(∂f/∂x, ∂f/∂u)`
    fn jacobians(&self, x: &Vector, u: &Vector) -> Result<(Mat, Mat)>;
    /// Disturbance map `E(x)`, `n_x × n_x`.
    fn disturbance(&self, x: &Vector) -> Mat;
    /// State indices of the planar position, if the model has one.
    fn position(&self) -> Option<(usize, usize)> {
        None
    }
}

/// Unicycle with constant speed, forward Euler.
#[derive(Clone, Debug, PartialEq)]
pub struct Dubins {
    pub v: f64,
    pub dt: f64,
    pub e: Mat,
}

impl Dubins {
    pub fn new(v: f64, dt: f64) -> Self {
        Dubins { v, dt, e: Mat::identity(3, 3) * 2.5e-2 }
    }
}

impl Model for Dubins {
    fn name(&self) -> &str {
        "dubins"
    }
    fn nx(&self) -> usize {
        3
    }
    fn nu(&self) -> usize {
        1
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        let (s, c) = x[2].sin_cos();
        Ok(Vector::from_vec(vec![
            x[0] + self.v * c * self.dt,
            x[1] + self.v * s * self.dt,
            x[2] + u[0] * self.dt,
        ]))
    }
    fn jacobians(&self, x: &Vector, _u: &Vector) -> Result<(Mat, Mat)> {
        let (s, c) = x[2].sin_cos();
        let a = Mat::from_row_slice(3, 3, &[
            1.0, 0.0, -self.v * s * self.dt,
            0.0, 1.0, self.v * c * self.dt,
            0.0, 0.0, 1.0,
        ]);
        let b = Mat::from_column_slice(3, 1, &[0.0, 0.0, self.dt]);
        Ok((a, b))
    }
    fn disturbance(&self, _x: &Vector) -> Mat {
        self.e.clone()
    }
    fn position(&self) -> Option<(usize, usize)> {
        Some((0, 1))
    }
}

/// Planar quadrotor `(p_x, p_y, φ, v_x, v_y, φ̇)` with two rotor thrusts,
/// integrated with one RK4 step per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarQuadrotor {
    pub mass: f64,
    pub gravity: f64,
    pub arm: f64,
    pub inertia: f64,
    pub dt: f64,
    pub e: Mat,
}

impl PlanarQuadrotor {
    pub fn new(dt: f64) -> Self {
        let e = Mat::from_diagonal(&Vector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0])) * 5e-2;
        PlanarQuadrotor { mass: 2.0576, gravity: 9.81, arm: 0.25, inertia: 0.01, dt, e }
    }

    /// Per-rotor thrust that balances gravity at zero pitch.
    pub fn hover_thrust(&self) -> f64 {
        0.5 * self.mass * self.gravity
    }

    /// Continuous-time vector field.
    pub fn derivative(&self, x: &Vector, u: &Vector) -> Vector {
        let (s, c) = x[2].sin_cos();
        let thrust = u[0] + u[1];
        Vector::from_vec(vec![
            x[3],
            x[4],
            x[5],
            -thrust * s / self.mass,
            thrust * c / self.mass - self.gravity,
            self.arm / self.inertia * (u[1] - u[0]),
        ])
    }

    fn derivative_jacobians(&self, x: &Vector, u: &Vector) -> (Mat, Mat) {
        let (s, c) = x[2].sin_cos();
        let thrust = u[0] + u[1];
        let mut fx = Mat::zeros(6, 6);
        fx[(0, 3)] = 1.0;
        fx[(1, 4)] = 1.0;
        fx[(2, 5)] = 1.0;
        fx[(3, 2)] = -thrust * c / self.mass;
        fx[(4, 2)] = -thrust * s / self.mass;
        let k = self.arm / self.inertia;
        let fu = Mat::from_row_slice(6, 2, &[
            0.0, 0.0,
            0.0, 0.0,
            0.0, 0.0,
            -s / self.mass, -s / self.mass,
            c / self.mass, c / self.mass,
            -k, k,
        ]);
        (fx, fu)
    }
}

impl Model for PlanarQuadrotor {
    fn name(&self) -> &str {
        "quadrotor"
    }
    fn nx(&self) -> usize {
        6
    }
    fn nu(&self) -> usize {
        2
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        let h = self.dt;
        let k1 = self.derivative(x, u);
        let k2 = self.derivative(&(x + &k1 * (0.5 * h)), u);
        let k3 = self.derivative(&(x + &k2 * (0.5 * h)), u);
        let k4 = self.derivative(&(x + &k3 * h), u);
        Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
    }
    fn jacobians(&self, x: &Vector, u: &Vector) -> Result<(Mat, Mat)> {
        let h = self.dt;
        let eye = Mat::identity(6, 6);
        let k1 = self.derivative(x, u);
        let (f1x, f1u) = self.derivative_jacobians(x, u);
        let x2 = x + &k1 * (0.5 * h);
        let k2 = self.derivative(&x2, u);
        let (f2x, f2u) = self.derivative_jacobians(&x2, u);
        let x3 = x + &k2 * (0.5 * h);
        let k3 = self.derivative(&x3, u);
        let (f3x, f3u) = self.derivative_jacobians(&x3, u);
        let x4 = x + &k3 * h;
        let (f4x, f4u) = self.derivative_jacobians(&x4, u);

        let k1x = f1x;
        let k2x = &f2x * (&eye + &k1x * (0.5 * h));
        let k3x = &f3x * (&eye + &k2x * (0.5 * h));
        let k4x = &f4x * (&eye + &k3x * h);
        let k1u = f1u;
        let k2u = &f2x * &k1u * (0.5 * h) + &f2u;
        let k3u = &f3x * &k2u * (0.5 * h) + &f3u;
        let k4u = &f4x * &k3u * h + &f4u;
        let a = &eye + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
        let b = (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * (h / 6.0);
        Ok((a, b))
    }
    fn disturbance(&self, _x: &Vector) -> Mat {
        self.e.clone()
    }
    fn position(&self) -> Option<(usize, usize)> {
        Some((0, 1))
    }
}

/// Serial chain of uniform rods driven by joint torques.
///
/// State `(φ, φ̇)` uses absolute link angles measured from the downward
/// vertical, so the upright equilibrium is `φ = π`. Joint `i` acts between
/// link `i - 1` (or the base) and link `i`. Integrated with semi-implicit
/// Euler: rates first, then angles with the new rates.
#[derive(Clone, Debug, PartialEq)]
pub struct Pendulum {
    masses: Vec<f64>,
    lengths: Vec<f64>,
    pub gravity: f64,
    pub dt: f64,
    pub e: Mat,
    /// `m_jk = Σ_i m_i a_ij a_ik` plus the rod inertia on the diagonal.
    coupling: Mat,
    /// `Σ_i m_i a_ij`
    gravity_arm: Vec<f64>,
}

impl Pendulum {
    /// Unit masses and lengths.
    pub fn new(links: usize, dt: f64) -> Result<Self> {
        Self::with_params(vec![1.0; links], vec![1.0; links], dt)
    }

    pub fn with_params(masses: Vec<f64>, lengths: Vec<f64>, dt: f64) -> Result<Self> {
        let n = masses.len();
        if n == 0 || lengths.len() != n {
            return Err(Error::Model("pendulum needs one mass and one length per link".into()));
        }
        if masses.iter().chain(&lengths).any(|v| !(v.is_finite() && *v > 0.0)) || !(dt > 0.0) {
            return Err(Error::Model("pendulum masses, lengths and dt must be positive".into()));
        }
        // Lever of link j's rotation on the centre of mass of link i.
        let lever = |i: usize, j: usize| match j.cmp(&i) {
            std::cmp::Ordering::Less => lengths[j],
            std::cmp::Ordering::Equal => 0.5 * lengths[i],
            std::cmp::Ordering::Greater => 0.0,
        };
        let mut coupling = Mat::zeros(n, n);
        let mut gravity_arm = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                gravity_arm[j] += masses[i] * lever(i, j);
                for k in 0..n {
                    coupling[(j, k)] += masses[i] * lever(i, j) * lever(i, k);
                }
            }
            coupling[(i, i)] += masses[i] * lengths[i] * lengths[i] / 12.0;
        }
        let mut e = Mat::zeros(2 * n, 2 * n);
        for i in n..2 * n {
            e[(i, i)] = 1e-2;
        }
        Ok(Pendulum { masses, lengths, gravity: 9.81, dt, e, coupling, gravity_arm })
    }

    pub fn links(&self) -> usize {
        self.masses.len()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    /// Upright equilibrium state.
    pub fn upright(&self) -> Vector {
        let n = self.links();
        Vector::from_fn(2 * n, |i, _| if i < n { std::f64::consts::PI } else { 0.0 })
    }

    fn mass_matrix(&self, phi: &[f64]) -> Mat {
        let n = self.links();
        Mat::from_fn(n, n, |j, k| self.coupling[(j, k)] * (phi[j] - phi[k]).cos())
    }

    fn bias(&self, phi: &[f64], rate: &[f64]) -> Vector {
        let n = self.links();
        Vector::from_fn(n, |j, _| {
            let coriolis: f64 = (0..n).map(|k| self.coupling[(j, k)] * (phi[j] - phi[k]).sin() * rate[k] * rate[k]).sum();
            coriolis + self.gravity * phi[j].sin() * self.gravity_arm[j]
        })
    }

    fn torque_map(&self) -> Mat {
        let n = self.links();
        Mat::from_fn(n, n, |j, i| if i == j { 1.0 } else if i == j + 1 { -1.0 } else { 0.0 })
    }

    fn factor(&self, phi: &[f64]) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.mass_matrix(phi)).ok_or_else(|| Error::Model("pendulum mass matrix is not positive definite".into()))
    }

    /// Angular accelerations.
    pub fn acceleration(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        let n = self.links();
        let (phi, rate) = (&x.as_slice()[..n], &x.as_slice()[n..]);
        let rhs = self.torque_map() * u - self.bias(phi, rate);
        Ok(self.factor(phi)?.solve(&rhs))
    }

    /// Kinetic plus potential energy.
    pub fn energy(&self, x: &Vector) -> f64 {
        let n = self.links();
        let (phi, rate) = (&x.as_slice()[..n], &x.as_slice()[n..]);
        let qd = Vector::from_column_slice(rate);
        let kinetic = 0.5 * qd.dot(&(self.mass_matrix(phi) * &qd));
        let potential: f64 = (0..n).map(|j| -self.gravity * self.gravity_arm[j] * phi[j].cos()).sum();
        kinetic + potential
    }
}

impl Model for Pendulum {
    fn name(&self) -> &str {
        "pendulum"
    }
    fn nx(&self) -> usize {
        2 * self.links()
    }
    fn nu(&self) -> usize {
        self.links()
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        let n = self.links();
        let acc = self.acceleration(x, u)?;
        let mut out = x.clone();
        for i in 0..n {
            out[n + i] = x[n + i] + self.dt * acc[i];
            out[i] = x[i] + self.dt * out[n + i];
        }
        Ok(out)
    }
    fn jacobians(&self, x: &Vector, u: &Vector) -> Result<(Mat, Mat)> {
        let n = self.links();
        let (phi, rate) = (&x.as_slice()[..n], &x.as_slice()[n..]);
        let chol = self.factor(phi)?;
        let rhs = self.torque_map() * u - self.bias(phi, rate);
        let acc = chol.solve(&rhs);
        let m = &self.coupling;

        // ∂(M φ̈ + h)/∂φ_l and ∂h/∂φ̇_l, column l.
        let mut d_phi = Mat::zeros(n, n);
        let mut d_rate = Mat::zeros(n, n);
        for j in 0..n {
            let mut diag = self.gravity * phi[j].cos() * self.gravity_arm[j];
            for k in 0..n {
                let (s, c) = (phi[j] - phi[k]).sin_cos();
                diag += m[(j, k)] * c * rate[k] * rate[k] - m[(j, k)] * s * acc[k];
            }
            for l in 0..n {
                let (s, c) = (phi[j] - phi[l]).sin_cos();
                d_phi[(j, l)] = m[(j, l)] * s * acc[l] - m[(j, l)] * c * rate[l] * rate[l];
                d_rate[(j, l)] = 2.0 * m[(j, l)] * s * rate[l];
            }
            d_phi[(j, j)] += diag;
        }
        let acc_phi = -chol.solve(&d_phi);
        let acc_rate = -chol.solve(&d_rate);
        let acc_u = chol.solve(&self.torque_map());

        let dt = self.dt;
        let eye = Mat::identity(n, n);
        let mut a = Mat::zeros(2 * n, 2 * n);
        let rate_rate = &eye + &acc_rate * dt;
        a.view_mut((n, 0), (n, n)).copy_from(&(&acc_phi * dt));
        a.view_mut((n, n), (n, n)).copy_from(&rate_rate);
        a.view_mut((0, 0), (n, n)).copy_from(&(&eye + &acc_phi * (dt * dt)));
        a.view_mut((0, n), (n, n)).copy_from(&(&rate_rate * dt));
        let mut b = Mat::zeros(2 * n, n);
        b.view_mut((n, 0), (n, n)).copy_from(&(&acc_u * dt));
        b.view_mut((0, 0), (n, n)).copy_from(&(&acc_u * (dt * dt)));
        Ok((a, b))
    }
    fn disturbance(&self, _x: &Vector) -> Mat {
        self.e.clone()
    }
}

/// Linear time-invariant model `x⁺ = A x + B u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub a: Mat,
    pub b: Mat,
    pub e: Mat,
    pub dt: f64,
}

impl Model for Linear {
    fn name(&self) -> &str {
        "linear"
    }
    fn nx(&self) -> usize {
        self.a.nrows()
    }
    fn nu(&self) -> usize {
        self.b.ncols()
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        Ok(&self.a * x + &self.b * u)
    }
    fn jacobians(&self, _x: &Vector, _u: &Vector) -> Result<(Mat, Mat)> {
        Ok((self.a.clone(), self.b.clone()))
    }
    fn disturbance(&self, _x: &Vector) -> Mat {
        self.e.clone()
    }
    fn position(&self) -> Option<(usize, usize)> {
        (self.a.nrows() >= 2).then_some((0, 1))
    }
}

/// Disk obstacle `r² - ‖p - c‖² ≤ 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Obstacle {
    pub fn value(&self, px: f64, py: f64) -> f64 {
        self.r * self.r - (px - self.cx).powi(2) - (py - self.cy).powi(2)
    }

    /// `(∂/∂p_x, ∂/∂p_y)`
    pub fn gradient(&self, px: f64, py: f64) -> (f64, f64) {
        (-2.0 * (px - self.cx), -2.0 * (py - self.cy))
    }
}

/// Stage and terminal constraints `g(x, u) ≤ 0`, `g^f(x) ≤ 0`.
///
/// Stage rows, in order: `u - u_max`, `u_min - u`, `x - x_max`,
/// `x_min - x`, one row per obstacle. Terminal rows: the state box rows then
/// the obstacle rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Constraints {
    pub u_max: Option<Vector>,
    pub u_min: Option<Vector>,
    pub x_max: Option<Vector>,
    pub x_min: Option<Vector>,
    pub obstacles: Vec<Obstacle>,
    /// Position indices used by the obstacle rows.
    pub position: Option<(usize, usize)>,
}

impl Constraints {
    pub fn input_box(lo: Vector, hi: Vector) -> Self {
        Constraints { u_min: Some(lo), u_max: Some(hi), ..Self::default() }
    }

    pub fn with_obstacles(mut self, obstacles: Vec<Obstacle>, position: (usize, usize)) -> Self {
        self.obstacles = obstacles;
        self.position = Some(position);
        self
    }

    fn len(v: &Option<Vector>) -> usize {
        v.as_ref().map_or(0, |v| v.len())
    }

    fn state_rows(&self) -> usize {
        Self::len(&self.x_max) + Self::len(&self.x_min)
    }

    pub fn stage_rows(&self) -> usize {
        Self::len(&self.u_max) + Self::len(&self.u_min) + self.state_rows() + self.obstacles.len()
    }

    pub fn terminal_rows(&self) -> usize {
        self.state_rows() + self.obstacles.len()
    }

    /// Index of the first obstacle row in the stage and terminal vectors.
    pub fn obstacle_offsets(&self) -> (usize, usize) {
        (self.stage_rows() - self.obstacles.len(), self.state_rows())
    }

    fn state_part(&self, x: &Vector, out: &mut Vec<f64>) {
        if let Some(hi) = &self.x_max {
            out.extend(x.iter().zip(hi.iter()).map(|(x, h)| x - h));
        }
        if let Some(lo) = &self.x_min {
            out.extend(x.iter().zip(lo.iter()).map(|(x, l)| l - x));
        }
        if let Some((ix, iy)) = self.position {
            out.extend(self.obstacles.iter().map(|o| o.value(x[ix], x[iy])));
        }
    }

    fn state_jac(&self, x: &Vector, c: &mut Mat, mut row: usize) {
        if let Some(hi) = &self.x_max {
            for i in 0..hi.len() {
                c[(row, i)] = 1.0;
                row += 1;
            }
        }
        if let Some(lo) = &self.x_min {
            for i in 0..lo.len() {
                c[(row, i)] = -1.0;
                row += 1;
            }
        }
        if let Some((ix, iy)) = self.position {
            for o in &self.obstacles {
                let (gx, gy) = o.gradient(x[ix], x[iy]);
                c[(row, ix)] = gx;
                c[(row, iy)] = gy;
                row += 1;
            }
        }
    }

    pub fn stage(&self, x: &Vector, u: &Vector) -> Vector {
        let mut out = Vec::with_capacity(self.stage_rows());
        if let Some(hi) = &self.u_max {
            out.extend(u.iter().zip(hi.iter()).map(|(u, h)| u - h));
        }
        if let Some(lo) = &self.u_min {
            out.extend(u.iter().zip(lo.iter()).map(|(u, l)| l - u));
        }
        self.state_part(x, &mut out);
        Vector::from_vec(out)
    }

    /// `(∂g/∂x, ∂g/∂u)`
    pub fn stage_jacobians(&self, x: &Vector, nu: usize) -> (Mat, Mat) {
        let rows = self.stage_rows();
        let mut c = Mat::zeros(rows, x.len());
        let mut d = Mat::zeros(rows, nu);
        let mut row = 0;
        if let Some(hi) = &self.u_max {
            for i in 0..hi.len() {
                d[(row, i)] = 1.0;
                row += 1;
            }
        }
        if let Some(lo) = &self.u_min {
            for i in 0..lo.len() {
                d[(row, i)] = -1.0;
                row += 1;
            }
        }
        self.state_jac(x, &mut c, row);
        (c, d)
    }

    pub fn terminal(&self, x: &Vector) -> Vector {
        let mut out = Vec::with_capacity(self.terminal_rows());
        self.state_part(x, &mut out);
        Vector::from_vec(out)
    }

    pub fn terminal_jacobian(&self, x: &Vector) -> Mat {
        let mut c = Mat::zeros(self.terminal_rows(), x.len());
        self.state_jac(x, &mut c, 0);
        c
    }

    pub fn validate(&self, nx: usize, nu: usize) -> Result<()> {
        let check = |v: &Option<Vector>, n: usize, what: &str| match v {
            Some(v) if v.len() != n => Err(Error::Dimension(format!("{what} has length {} (expected {n})", v.len()))),
            _ => Ok(()),
        };
        check(&self.u_max, nu, "u_max")?;
        check(&self.u_min, nu, "u_min")?;
        check(&self.x_max, nx, "x_max")?;
        check(&self.x_min, nx, "x_min")?;
        if !self.obstacles.is_empty() {
            match self.position {
                Some((i, j)) if i < nx && j < nx => {}
                _ => return Err(Error::Model("obstacles need a model with a planar position".into())),
            }
        }
        Ok(())
    }
}

/// Quadratic tracking cost toward a constant reference.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingCost {
    pub q: Mat,
    pub r: Mat,
    pub q_terminal: Mat,
    pub x_ref: Vector,
    pub u_ref: Vector,
}

impl TrackingCost {
    pub fn diagonal(q: &[f64], r: &[f64], q_terminal: &[f64], x_ref: Vector, u_ref: Vector) -> Self {
        let diag = |v: &[f64]| Mat::from_diagonal(&Vector::from_column_slice(v));
        TrackingCost { q: diag(q), r: diag(r), q_terminal: diag(q_terminal), x_ref, u_ref }
    }

    pub fn stage(&self, x: &Vector, u: &Vector) -> f64 {
        let dx = x - &self.x_ref;
        let du = u - &self.u_ref;
        0.5 * dx.dot(&(&self.q * &dx)) + 0.5 * du.dot(&(&self.r * &du))
    }

    pub fn terminal(&self, x: &Vector) -> f64 {
        let dx = x - &self.x_ref;
        0.5 * dx.dot(&(&self.q_terminal * &dx))
    }
}

/// Model selection as stored in scenario files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Dubins {
        #[serde(default = "default_dubins_speed")]
        v: f64,
        dt: f64,
        #[serde(default)]
        e_scale: Option<f64>,
    },
    Quadrotor {
        dt: f64,
        #[serde(default)]
        e_scale: Option<f64>,
    },
    Pendulum {
        links: usize,
        #[serde(default = "default_pendulum_dt")]
        dt: f64,
        #[serde(default)]
        masses: Option<Vec<f64>>,
        #[serde(default)]
        lengths: Option<Vec<f64>>,
        #[serde(default)]
        e_scale: Option<f64>,
    },
}

fn default_dubins_speed() -> f64 {
    1.0
}

fn default_pendulum_dt() -> f64 {
    0.01
}

impl ModelSpec {
    /// Instantiates the model; `e_scale` multiplies the default disturbance map.
    pub fn build(&self) -> Result<Arc<dyn Model>> {
        let positive = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Model(format!("{what} must be positive")))
            }
        };
        let scale = |e: &Option<f64>| -> Result<f64> {
            match e {
                Some(s) if !(s.is_finite() && *s >= 0.0) => Err(Error::Model("e_scale must be non-negative".into())),
                Some(s) => Ok(*s),
                None => Ok(1.0),
            }
        };
        Ok(match self {
            ModelSpec::Dubins { v, dt, e_scale } => {
                positive(*dt, "dt")?;
                let mut m = Dubins::new(*v, *dt);
                m.e *= scale(e_scale)?;
                Arc::new(m)
            }
            ModelSpec::Quadrotor { dt, e_scale } => {
                positive(*dt, "dt")?;
                let mut m = PlanarQuadrotor::new(*dt);
                m.e *= scale(e_scale)?;
                Arc::new(m)
            }
            ModelSpec::Pendulum { links, dt, masses, lengths, e_scale } => {
                let masses = masses.clone().unwrap_or_else(|| vec![1.0; *links]);
                let lengths = lengths.clone().unwrap_or_else(|| vec![1.0; *links]);
                let mut m = Pendulum::with_params(masses, lengths, *dt)?;
                m.e *= scale(e_scale)?;
                Arc::new(m)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::normal_vec;
    use crate::reference::{finite_diff, fine_euler};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn check_jacobians(model: &dyn Model, x: &Vector, u: &Vector, tol: f64) {
        let (a, b) = model.jacobians(x, u).unwrap();
        let fa = finite_diff(|x| model.step(x, u).unwrap(), x, 1e-5);
        let fb = finite_diff(|u| model.step(x, u).unwrap(), u, 1e-5);
        assert!((&a - &fa).amax() <= tol, "{} A error {}", model.name(), (&a - fa).amax());
        assert!((&b - &fb).amax() <= tol, "{} B error {}", model.name(), (&b - fb).amax());
    }

    #[test]
    fn dubins_examples() {
        let m = Dubins::new(1.0, 0.1);
        let x = m.step(&Vector::zeros(3), &Vector::zeros(1)).unwrap();
        assert_eq!(x, Vector::from_vec(vec![0.1, 0.0, 0.0]));
        let y = m.step(&Vector::from_vec(vec![0.0, 0.0, PI / 2.0]), &Vector::zeros(1)).unwrap();
        assert!(y[0].abs() <= 1e-17 && (y[1] - 0.1).abs() <= 1e-17);
        assert_eq!(m.disturbance(&x), Mat::identity(3, 3) * 2.5e-2);
        let (a, _) = m.jacobians(&Vector::zeros(3), &Vector::zeros(1)).unwrap();
        assert_eq!(a.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn quadrotor_force_balance() {
        let m = PlanarQuadrotor::new(0.02);
        let h = m.hover_thrust();
        let d = m.derivative(&Vector::zeros(6), &Vector::from_vec(vec![h, h]));
        assert!(d[4].abs() <= 1e-14);
        let d = m.derivative(&Vector::zeros(6), &Vector::from_vec(vec![h, h + 0.1]));
        assert!((d[5] - 0.25 * 0.1 / 0.01).abs() <= 1e-12);
    }

    #[test]
    fn quadrotor_rk4_matches_fine_integration() {
        let m = PlanarQuadrotor::new(0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = normal_vec(&mut rng, 6);
        let u = Vector::from_vec(vec![9.0, 11.0]);
        // Richardson-extrapolated forward Euler cancels its O(h) term.
        let coarse = fine_euler(|x| m.derivative(x, &u), &x, 0.02, 2000);
        let fine = fine_euler(|x| m.derivative(x, &u), &x, 0.02, 4000) * 2.0 - coarse;
        let rk4 = m.step(&x, &u).unwrap();
        assert!((rk4 - fine).amax() <= 1e-6);
    }

    #[test]
    fn single_link_reduces_to_pivot_form() {
        let p = Pendulum::new(1, 0.01).unwrap();
        let x = Vector::from_vec(vec![0.7, 0.3]);
        let u = Vector::from_element(1, 2.0);
        let acc = p.acceleration(&x, &u).unwrap()[0];
        let expected = (2.0 - 9.81 * 0.5 * 0.7f64.sin()) / (1.0 / 3.0);
        assert!((acc - expected).abs() <= 1e-12);
    }

    #[test]
    fn upright_is_equilibrium() {
        let p = Pendulum::new(3, 0.01).unwrap();
        let acc = p.acceleration(&p.upright(), &Vector::zeros(3)).unwrap();
        assert!(acc.amax() <= 1e-12);
    }

    #[test]
    fn two_link_energy_drift_is_small() {
        let p = Pendulum::new(2, 1e-3).unwrap();
        let mut x = Vector::from_vec(vec![0.8, 1.6, 0.0, 0.0]);
        let e0 = p.energy(&x);
        let u = Vector::zeros(2);
        for _ in 0..1000 {
            x = p.step(&x, &u).unwrap();
        }
        assert!(((p.energy(&x) - e0) / e0).abs() <= 0.01);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..5 {
            let x3 = normal_vec(&mut rng, 3);
            check_jacobians(&Dubins::new(1.3, 0.1), &x3, &normal_vec(&mut rng, 1), 1e-6);
            let q = PlanarQuadrotor::new(0.02);
            check_jacobians(&q, &normal_vec(&mut rng, 6), &(normal_vec(&mut rng, 2) * 3.0), 1e-6);
            for links in [1, 2, 4] {
                let p = Pendulum::new(links, 0.01).unwrap();
                let x = normal_vec(&mut rng, 2 * links);
                check_jacobians(&p, &x, &(normal_vec(&mut rng, links) * 5.0), 1e-6);
            }
        }
    }

    #[test]
    fn pendulum_rejects_bad_params() {
        assert!(Pendulum::with_params(vec![1.0, -1.0], vec![1.0, 1.0], 0.01).is_err());
        assert!(Pendulum::with_params(vec![1.0], vec![1.0, 1.0], 0.01).is_err());
        assert!(Pendulum::new(0, 0.01).is_err());
    }

    #[test]
    fn obstacle_values() {
        let o = Obstacle { cx: 1.0, cy: 2.0, r: 0.5 };
        assert_eq!(o.value(1.0, 2.0), 0.25);
        assert_eq!(o.value(1.5, 2.0), 0.0);
    }

    #[test]
    fn obstacle_field_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let obstacles: Vec<Obstacle> = (0..30)
            .map(|_| {
                let v = normal_vec(&mut rng, 3);
                Obstacle { cx: v[0], cy: v[1], r: v[2].abs() }
            })
            .collect();
        let cons = Constraints::default().with_obstacles(obstacles.clone(), (0, 1));
        let x = Vector::from_vec(vec![0.3, -0.2, 1.0]);
        let g = cons.stage(&x, &Vector::zeros(1));
        for (i, o) in obstacles.iter().enumerate() {
            let expected = o.r * o.r - (0.3 - o.cx) * (0.3 - o.cx) - (-0.2 - o.cy) * (-0.2 - o.cy);
            assert_eq!(g[i], expected);
        }
    }

    #[test]
    fn constraint_jacobians_match_finite_differences() {
        let cons = Constraints {
            u_max: Some(Vector::from_element(1, 1.0)),
            u_min: Some(Vector::from_element(1, -1.0)),
            x_max: Some(Vector::from_element(3, 5.0)),
            x_min: None,
            obstacles: vec![Obstacle { cx: 1.0, cy: 0.0, r: 0.3 }, Obstacle { cx: 0.0, cy: 2.0, r: 0.4 }],
            position: Some((0, 1)),
        };
        let x = Vector::from_vec(vec![0.4, 0.9, 0.2]);
        let u = Vector::from_element(1, 0.3);
        let (c, d) = cons.stage_jacobians(&x, 1);
        assert!((c - finite_diff(|x| cons.stage(x, &u), &x, 1e-5)).amax() <= 1e-8);
        assert!((d - finite_diff(|u| cons.stage(&x, u), &u, 1e-5)).amax() <= 1e-8);
        let cf = cons.terminal_jacobian(&x);
        assert!((cf - finite_diff(|x| cons.terminal(x), &x, 1e-5)).amax() <= 1e-8);
    }
}
