//! Receding-horizon nominal MPC against tube MPC on a planar quadrotor under
//! random and adversarial velocity disturbances.
//!
//! Usage: `quadrotor_compare [rollouts]` (default 31).

use std::sync::Arc;
use std::time::Instant;

use robust_mpc::models::{Constraints, Obstacle, PlanarQuadrotor, TrackingCost};
use robust_mpc::rollout::{run_mpc_campaign, safety_rate, Controller, DisturbanceKind, NominalMpc, RobustMpc};
use robust_mpc::sls::{RobustSettings, SlsWeights};
use robust_mpc::sqp::{Ocp, SqpSettings};
use robust_mpc::{Executor, Mat, Vector};

fn main() -> robust_mpc::Result<()> {
    let count: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(31);
    let model = Arc::new(PlanarQuadrotor::new(0.05));
    let hover = model.hover_thrust();
    let ocp = Ocp {
        model: model.clone(),
        constraints: Constraints::input_box(Vector::zeros(2), Vector::from_element(2, 2.0 * hover))
            .with_obstacles(vec![Obstacle { cx: 1.5, cy: 0.05, r: 0.5 }], (0, 1)),
        cost: TrackingCost::diagonal(
            &[5.0, 5.0, 1.0, 1.0, 1.0, 0.1],
            &[0.1, 0.1],
            &[50.0, 50.0, 10.0, 10.0, 10.0, 1.0],
            Vector::from_vec(vec![3.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            Vector::from_element(2, hover),
        ),
        horizon: 25,
    };
    let weights = SlsWeights { q: Mat::identity(6, 6) * 10.0, r: Mat::identity(2, 2) * 10.0, q_terminal: Mat::identity(6, 6) * 10.0 };
    let robust = RobustSettings::new(SqpSettings::default(), weights);
    let adversarial = count / 3 + count % 3;
    let mix = [
        (DisturbanceKind::UniformBall, count / 3),
        (DisturbanceKind::Boundary, count / 3),
        (DisturbanceKind::Adversarial, adversarial),
    ];
    let x0 = Vector::zeros(6);
    let exec = Executor::Sequential;

    for robust_mode in [false, true] {
        let started = Instant::now();
        let make = || -> Box<dyn Controller> {
            if robust_mode {
                Box::new(RobustMpc::new(ocp.clone(), robust.clone(), true))
            } else {
                Box::new(NominalMpc::new(ocp.clone(), SqpSettings::default(), true))
            }
        };
        let records = run_mpc_campaign(make, model.as_ref(), &ocp.constraints, &x0, 30, &mix, 7, &exec)?;
        let worst = records.iter().map(|r| -r.min_margin).fold(f64::NEG_INFINITY, f64::max);
        let collisions: Vec<String> =
            records.iter().filter(|r| !r.safe).map(|r| format!("{}:{}", r.id, r.kind.as_str())).collect();
        println!(
            "{:>7}: safety rate {:.3} over {} rollouts, worst constraint value {worst:.2e}, unsafe {collisions:?} ({:.1} s)",
            if robust_mode { "robust" } else { "nominal" },
            safety_rate(records.iter().map(|r| &r.safe)),
            records.len(),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
