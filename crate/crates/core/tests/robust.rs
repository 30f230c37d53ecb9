//! Robust pipeline end to end on small problems.

use std::sync::Arc;

use proptest::prelude::*;

use robust_mpc::models::{Constraints, Dubins, Linear, Obstacle, TrackingCost};
use robust_mpc::rollout::{run_rollouts, DisturbanceKind};
use robust_mpc::sls::{solve_robust, RobustSettings, SlsWeights};
use robust_mpc::sqp::{solve_nmpc, Ocp, SqpSettings, Trajectory};
use robust_mpc::{Executor, Mat, Vector};

fn dubins_ocp(e_scale: f64) -> Ocp {
    let mut model = Dubins::new(1.0, 0.2);
    model.e *= e_scale;
    Ocp {
        model: Arc::new(model),
        constraints: Constraints::input_box(Vector::from_element(1, -2.0), Vector::from_element(1, 2.0))
            .with_obstacles(vec![Obstacle { cx: 2.0, cy: 0.05, r: 0.4 }], (0, 1)),
        cost: TrackingCost::diagonal(&[0.0, 5.0, 1.0], &[0.1], &[0.0, 5.0, 1.0], Vector::from_vec(vec![4.0, 0.0, 0.0]), Vector::zeros(1)),
        horizon: 20,
    }
}

fn weights(nx: usize, nu: usize, scale: f64) -> SlsWeights {
    SlsWeights { q: Mat::identity(nx, nx) * scale, r: Mat::identity(nu, nu) * scale, q_terminal: Mat::identity(nx, nx) * scale }
}

#[test]
fn zero_disturbance_reduces_to_the_nominal_solve() {
    let ocp = dubins_ocp(0.0);
    let x0 = Vector::zeros(3);
    let guess = Trajectory::rollout(ocp.model.as_ref(), &x0, vec![Vector::zeros(1); 20]).unwrap();
    let exec = Executor::Sequential;
    let sqp = SqpSettings::default();
    let robust = solve_robust(&ocp, &x0, &RobustSettings::new(sqp.clone(), weights(3, 1, 10.0)), &guess, &exec).unwrap();
    let nominal = solve_nmpc(&ocp, &x0, &sqp, &guess, None, None, &exec).unwrap();
    assert_eq!(robust.tightening.max_entry(), 0.0);
    assert!(robust.stats.converged);
    assert_eq!(robust.nominal.traj, nominal.traj);
}

#[test]
fn dubins_plan_clears_the_obstacle_by_its_tightening() {
    let ocp = dubins_ocp(1.0);
    let x0 = Vector::zeros(3);
    let guess = Trajectory::rollout(ocp.model.as_ref(), &x0, vec![Vector::zeros(1); 20]).unwrap();
    let exec = Executor::Sequential;
    let settings = RobustSettings::new(SqpSettings::default(), weights(3, 1, 10.0));
    let sol = solve_robust(&ocp, &x0, &settings, &guess, &exec).unwrap();
    assert!(sol.stats.converged);
    assert!(sol.tightening.max_entry() > 0.0);
    assert!(ocp.violation(&sol.nominal.traj, Some(&sol.tightening)) <= settings.sqp.kkt_tol);

    let mix = [(DisturbanceKind::UniformBall, 10), (DisturbanceKind::Boundary, 5), (DisturbanceKind::Adversarial, 5)];
    let records = run_rollouts(&ocp, &sol.nominal.traj, &sol.response, &sol.tightening, &mix, 11, &exec).unwrap();
    assert_eq!(records.len(), 20);
    assert!(records.iter().all(|r| r.safe && r.inside_tube && !r.disturbance_model_violated));
}

fn integrator(e: f64, n: usize) -> Ocp {
    let a = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let b = Mat::from_column_slice(2, 1, &[0.005, 0.1]);
    Ocp {
        model: Arc::new(Linear { a, b, e: Mat::identity(2, 2) * e, dt: 0.1 }),
        constraints: Constraints {
            x_min: Some(Vector::from_vec(vec![-1.0, -2.0])),
            x_max: Some(Vector::from_vec(vec![1.0, 2.0])),
            ..Constraints::input_box(Vector::from_element(1, -4.0), Vector::from_element(1, 4.0))
        },
        cost: TrackingCost::diagonal(&[1.0, 0.1], &[0.1], &[10.0, 1.0], Vector::zeros(2), Vector::zeros(1)),
        horizon: n,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    /// On a linear model the realized states stay in the synthesized tube for
    /// every disturbance kind.
    #[test]
    fn linear_rollouts_stay_in_the_tube(
        e in 0.001f64..0.02,
        n in 5usize..25,
        p0 in -0.6f64..0.6,
        seed in 0u64..1000,
    ) {
        let ocp = integrator(e, n);
        let x0 = Vector::from_vec(vec![p0, 0.0]);
        let guess = Trajectory::rollout(ocp.model.as_ref(), &x0, vec![Vector::zeros(1); n]).unwrap();
        let exec = Executor::Sequential;
        let settings = RobustSettings::new(SqpSettings::default(), SlsWeights::identity(2, 1));
        let sol = solve_robust(&ocp, &x0, &settings, &guess, &exec).unwrap();
        let mix = [(DisturbanceKind::UniformBall, 3), (DisturbanceKind::Boundary, 3), (DisturbanceKind::Adversarial, 2)];
        let records = run_rollouts(&ocp, &sol.nominal.traj, &sol.response, &sol.tightening, &mix, seed, &exec).unwrap();
        for r in &records {
            prop_assert!(r.inside_tube, "rollout {} left the tube: {:?}", r.id, r.tube_margins);
            prop_assert!(r.safe);
        }
    }
}
