//! Associative scans: inclusive prefix products of 2×2 matrices, computed on
//! the sequential and the thread-pool executor, with the layer count.

use nalgebra::Matrix2;
use robust_mpc::scan::{inclusive_scan, scan_depth, Direction, Executor};

fn main() -> robust_mpc::Result<()> {
    let n = 1000;
    let elements: Vec<Matrix2<f64>> =
        (0..n).map(|i| Matrix2::new(1.0, 1e-3 * (i as f64).sin(), 0.0, 1.0 - 1e-4 * (i % 7) as f64)).collect();
    // Forward scan combines (earlier, later) into later · earlier.
    let combine = |earlier: &Matrix2<f64>, later: &Matrix2<f64>| later * earlier;

    let seq = inclusive_scan(elements.clone(), combine, Direction::Forward, &Executor::Sequential)?;
    let par = inclusive_scan(elements.clone(), combine, Direction::Forward, &Executor::parallel(4)?)?;

    let mut running = Matrix2::identity();
    let mut worst = 0.0f64;
    for (e, s) in elements.iter().zip(&seq.values) {
        running = e * running;
        worst = worst.max((running - s).amax());
    }
    println!("prefix products of {n} matrices: max deviation from a loop {worst:.2e}");
    println!("executors agree bitwise: {}", seq.values == par.values);
    println!("combine layers: {} (predicted {})", seq.layers, scan_depth(n));

    let suffix = inclusive_scan(vec![1u64, 2, 3, 4, 5], |a, b| a + b, Direction::Reverse, &Executor::Sequential)?;
    println!("suffix sums of 1..=5: {:?}", suffix.values);
    Ok(())
}
