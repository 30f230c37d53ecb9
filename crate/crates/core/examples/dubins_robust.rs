//! Robust obstacle avoidance for a Dubins car, verified by policy rollouts.

use std::sync::Arc;

use robust_mpc::models::{Constraints, Dubins, Obstacle, TrackingCost};
use robust_mpc::rollout::{run_rollouts, safety_rate, DisturbanceKind};
use robust_mpc::sls::{solve_robust, RobustSettings, SlsWeights};
use robust_mpc::sqp::{solve_nmpc, Ocp, SqpSettings, Trajectory};
use robust_mpc::{Executor, Mat, Vector};

fn main() -> robust_mpc::Result<()> {
    let exec = Executor::Sequential;
    let model = Arc::new(Dubins::new(1.0, 0.2));
    let obstacle = Obstacle { cx: 2.0, cy: 0.05, r: 0.4 };
    let n = 20;
    let ocp = Ocp {
        model: model.clone(),
        constraints: Constraints::input_box(Vector::from_element(1, -2.0), Vector::from_element(1, 2.0))
            .with_obstacles(vec![obstacle], (0, 1)),
        cost: TrackingCost::diagonal(
            &[0.0, 5.0, 1.0],
            &[0.1],
            &[0.0, 5.0, 1.0],
            Vector::from_vec(vec![4.0, 0.0, 0.0]),
            Vector::zeros(1),
        ),
        horizon: n,
    };
    let x0 = Vector::zeros(3);
    let guess = Trajectory::rollout(model.as_ref(), &x0, vec![Vector::zeros(1); n])?;

    let nominal = solve_nmpc(&ocp, &x0, &SqpSettings::default(), &guess, None, None, &exec)?;
    let weights = SlsWeights { q: Mat::identity(3, 3) * 10.0, r: Mat::identity(1, 1) * 10.0, q_terminal: Mat::identity(3, 3) * 10.0 };
    let robust = solve_robust(&ocp, &x0, &RobustSettings::new(SqpSettings::default(), weights), &guess, &exec)?;
    println!(
        "robust solve: {} alternations, converged {}, largest tightening {:.4}",
        robust.stats.alternations,
        robust.stats.converged,
        robust.tightening.max_entry()
    );
    let clearance = |t: &Trajectory| t.x.iter().map(|x| -obstacle.value(x[0], x[1])).fold(f64::INFINITY, f64::min);
    println!(
        "plan clearance (r² - d² margin): nominal {:.4}, robust {:.4}",
        clearance(&nominal.traj),
        clearance(&robust.nominal.traj)
    );

    let mix = [(DisturbanceKind::UniformBall, 50), (DisturbanceKind::Boundary, 25), (DisturbanceKind::Adversarial, 25)];
    let records = run_rollouts(&ocp, &robust.nominal.traj, &robust.response, &robust.tightening, &mix, 0, &exec)?;
    let worst = records.iter().map(|r| -r.min_margin).fold(f64::NEG_INFINITY, f64::max);
    println!(
        "{} rollouts: safety rate {:.2}, worst constraint value {worst:.3e}, all inside the tube: {}",
        records.len(),
        safety_rate(records.iter().map(|r| &r.safe)),
        records.iter().all(|r| r.inside_tube)
    );
    Ok(())
}
