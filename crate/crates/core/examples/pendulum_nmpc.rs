//! Closed-loop stabilization of a double pendulum: full SQP at every step
//! against one real-time iteration per step.

use std::sync::Arc;
use std::time::Instant;

use robust_mpc::models::{Constraints, Model, Pendulum, TrackingCost};
use robust_mpc::rollout::{run_mpc, Disturbance, DisturbanceKind, NominalMpc};
use robust_mpc::sqp::{Ocp, SqpSettings};
use robust_mpc::{Executor, Vector};

fn main() -> robust_mpc::Result<()> {
    let mut pendulum = Pendulum::new(2, 0.01)?;
    pendulum.e *= 0.1;
    let upright = pendulum.upright();
    let model = Arc::new(pendulum);
    let ocp = Ocp {
        model: model.clone(),
        constraints: Constraints::input_box(Vector::from_element(2, -20.0), Vector::from_element(2, 20.0)),
        cost: TrackingCost::diagonal(&[10.0, 10.0, 1.0, 1.0], &[0.01, 0.01], &[100.0, 100.0, 10.0, 10.0], upright.clone(), Vector::zeros(2)),
        horizon: 64,
    };
    let mut x0 = upright.clone();
    x0[0] += 0.1;
    x0[1] -= 0.1;
    let exec = Executor::Sequential;

    for rti in [false, true] {
        let mut controller = NominalMpc::new(ocp.clone(), SqpSettings::default(), rti);
        let mut source = Disturbance::new(DisturbanceKind::UniformBall, 0, 0);
        let started = Instant::now();
        let record = run_mpc(&mut controller, model.as_ref(), &ocp.constraints, &x0, 200, &mut source, 0, &exec)?;
        let error = (record.x.last().unwrap() - &upright).amax();
        let sqp: usize = record.steps.iter().map(|s| s.sqp_iters).sum();
        println!(
            "{}: 200 steps in {:.2} s, {sqp} SQP iterations, final deviation from upright {error:.2e}, peak torque {:.2}",
            if rti { "real-time iteration" } else { "full SQP" },
            started.elapsed().as_secs_f64(),
            record.u.iter().map(|u| u.amax()).fold(0.0, f64::max)
        );
    }
    println!("state dimension {}, value scan depth {}", model.nx(), robust_mpc::scan::scan_depth(ocp.horizon + 1));
    Ok(())
}
