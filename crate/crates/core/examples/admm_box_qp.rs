//! Inequality-constrained LTV-QP by operator splitting, compared with a
//! dense interior-point solve of the same problem.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robust_mpc::admm::{solve_qp, AdmmSettings};
use robust_mpc::fixtures::random_ltv_qp;
use robust_mpc::reference::{dense_qp, flatten_qp, unflatten};
use robust_mpc::Executor;

fn main() -> robust_mpc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let qp = random_ltv_qp(&mut rng, 4, 2, 3, 16);
    let exec = Executor::Sequential;

    let dense = dense_qp(&flatten_qp(&qp))?;
    let (dx, du) = unflatten(&qp, &dense.x);
    let reference = qp.objective(&dx, &du);

    for tol in [1e-2, 1e-4, 1e-6] {
        let settings = AdmmSettings { max_iter: 20_000, ..AdmmSettings::with_tol(tol) };
        let cold = solve_qp(&qp, &settings, None, &exec)?;
        let warm = solve_qp(&qp, &settings, Some(&cold.state), &exec)?;
        let objective = qp.objective(&cold.solution.dx, &cold.solution.du);
        let violation = qp
            .constraint_values(&cold.solution.dx, &cold.solution.du)
            .zip_map(&qp.bounds(), |g, f| (g - f).max(0.0))
            .amax();
        println!(
            "tol {tol:.0e}: {} iterations ({} factorizations), rho {:.3}, objective gap {:.2e}, violation {violation:.2e}, warm restart {} iterations",
            cold.stats.iterations,
            cold.stats.factorizations,
            cold.state.rho,
            (objective - reference).abs() / reference.abs().max(1.0),
            warm.stats.iterations
        );
    }
    Ok(())
}
