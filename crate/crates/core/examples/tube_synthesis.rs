//! Disturbance-feedback synthesis around a fixed plan: system responses,
//! constraint tightening and a check that closed-loop rollouts stay inside
//! the resulting tube.

use std::sync::Arc;

use robust_mpc::models::{Constraints, Linear, TrackingCost};
use robust_mpc::rollout::{run_rollouts, DisturbanceKind};
use robust_mpc::sls::{assemble_costs, sls_cost, synthesize, tighten, SlsDuals, SlsWeights};
use robust_mpc::sqp::{linearize, Ocp, Trajectory};
use robust_mpc::{Executor, Mat, Vector};

fn main() -> robust_mpc::Result<()> {
    let a = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let b = Mat::from_column_slice(2, 1, &[0.005, 0.1]);
    let e = Mat::identity(2, 2) * 0.02;
    let n = 30;
    let ocp = Ocp {
        model: Arc::new(Linear { a, b, e: e.clone(), dt: 0.1 }),
        constraints: Constraints {
            x_max: Some(Vector::from_vec(vec![1.0, 0.5])),
            x_min: Some(Vector::from_vec(vec![-1.0, -0.5])),
            ..Constraints::input_box(Vector::from_element(1, -1.0), Vector::from_element(1, 1.0))
        },
        cost: TrackingCost::diagonal(&[1.0, 0.1], &[0.1], &[10.0, 1.0], Vector::zeros(2), Vector::zeros(1)),
        horizon: n,
    };
    let exec = Executor::Sequential;
    let plan = Trajectory::rollout(ocp.model.as_ref(), &Vector::from_vec(vec![0.5, 0.0]), vec![Vector::from_element(1, -0.1); n])?;
    let qp = linearize(&ocp, &plan, None, &exec)?;

    // Only the ratio of state to input weights shapes the response.
    for ratio in [0.01, 1.0, 100.0] {
        let weights = SlsWeights { q: Mat::identity(2, 2) * ratio, r: Mat::identity(1, 1), q_terminal: Mat::identity(2, 2) * ratio };
        let costs = assemble_costs(&SlsDuals::zeros(&qp), &qp, &weights);
        let phi = synthesize(&qp, &vec![e.clone(); n], &costs, &exec)?;
        let h = tighten(&phi, &qp);
        let records = run_rollouts(&ocp, &plan, &phi, &h, &[(DisturbanceKind::Boundary, 50)], 1, &exec)?;
        println!(
            "state/input weight {ratio:>6}: response cost {:.3e}, dynamics residual {:.1e}, largest tightening {:.4}, terminal {:.4}, rollouts inside the tube {}/{}",
            sls_cost(&phi, &weights),
            phi.dynamics_residual(&qp),
            h.max_entry(),
            h.terminal.amax(),
            records.iter().filter(|r| r.inside_tube).count(),
            records.len()
        );
    }
    Ok(())
}
