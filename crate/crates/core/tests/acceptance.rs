//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line prints even when an
//! earlier criterion fails. A criterion whose precondition the machine cannot
//! meet is reported as FAIL with the reason and does not set the exit status.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robust_mpc::admm::{self, AdmmSettings};
use robust_mpc::cli::{self, Mode};
use robust_mpc::fixtures::{normal_mat, normal_vec, random_cvf, random_ltv_qp};
use robust_mpc::lqr::{self, combine_cvf, CvfElement, LqrSolution, LtvQp};
use robust_mpc::models::{Constraints, Model, Pendulum, TrackingCost};
use robust_mpc::reference;
use robust_mpc::rollout::{self, run_mpc, run_rollouts, Disturbance, DisturbanceKind, NominalMpc};
use robust_mpc::scan::{inclusive_scan, Direction, Executor};
use robust_mpc::sls::{self, solve_robust, SlsDuals, SlsWeights};
use robust_mpc::sqp::{solve_nmpc, Ocp, SqpSettings, Trajectory};
use robust_mpc::{Error, Mat, Vector};

enum Verdict {
    Pass(String),
    Fail(String),
    /// Failed because the machine lacks a stated precondition.
    Unattainable(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn scenario(name: &str) -> cli::Prepared {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    let s = cli::load_scenario(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    cli::prepare(&s).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn rel_err(got: &Mat, expected: &Mat) -> f64 {
    (got - expected).amax() / expected.amax().max(1.0)
}

fn max_rel_vecs(got: &[Vector], expected: &[Vector]) -> f64 {
    got.iter()
        .zip(expected)
        .map(|(a, b)| (a - b).amax() / b.amax().max(1.0))
        .fold(0.0, f64::max)
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn solution_bits_equal(a: &LqrSolution, b: &LqrSolution) -> bool {
    let vecs = |x: &[Vector], y: &[Vector]| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| same_bits(p.as_slice(), q.as_slice()));
    let mats = |x: &[Mat], y: &[Mat]| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| same_bits(p.as_slice(), q.as_slice()));
    vecs(&a.dx, &b.dx)
        && vecs(&a.du, &b.du)
        && vecs(&a.feedforward, &b.feedforward)
        && vecs(&a.p_lin, &b.p_lin)
        && mats(&a.gains, &b.gains)
        && mats(&a.p, &b.p)
}

fn violation(qp: &LtvQp, dx: &[Vector], du: &[Vector]) -> f64 {
    let g = qp.constraint_values(dx, du);
    let f = qp.bounds();
    g.iter().zip(f.iter()).map(|(g, f)| g - f).fold(0.0, f64::max)
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let started = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let nx = rng.random_range(1..=8);
        let nu = rng.random_range(1..=4);
        let n = rng.random_range(1..=128);
        let qp = random_ltv_qp(&mut rng, nx, nu, 0, n);
        let got = lqr::solve(&qp, &Executor::Sequential).expect("scan LQR");
        let expected = reference::riccati_lqr(&qp).expect("Riccati");
        worst = worst
            .max(max_rel_vecs(&got.dx, &expected.dx))
            .max(max_rel_vecs(&got.du, &expected.du))
            .max(got.gains.iter().zip(&expected.gains).map(|(a, b)| rel_err(a, b)).fold(0.0, f64::max));
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(worst <= 1e-8 && secs <= 10.0, format!("max rel error {worst:.2e} (≤ 1e-8), {secs:.2} s (≤ 10 s)"))
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let exec = Executor::Sequential;
    let qp = random_ltv_qp(&mut rng, 5, 3, 0, 40);
    let (cache, _) = lqr::build_cache(&qp, 7, &exec).expect("cache");
    let mut equal = 0;
    for _ in 0..50 {
        let mut moved = qp.clone();
        for s in &mut moved.stages {
            s.q_lin = normal_vec(&mut rng, 5);
            s.r_lin = normal_vec(&mut rng, 3);
        }
        moved.terminal.q_lin = normal_vec(&mut rng, 5);
        let replay = lqr::solve_cached(&moved, &cache, 7, &exec).expect("cached solve");
        let fresh = lqr::solve(&moved, &exec).expect("fresh solve");
        equal += solution_bits_equal(&replay, &fresh) as usize;
    }
    let rejected = matches!(lqr::solve_cached(&qp, &cache, 8, &exec), Err(Error::CacheInvalidated { .. }));
    verdict(equal == 50 && rejected, format!("{equal}/50 bitwise equal, stale generation rejected: {rejected}"))
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let settings = AdmmSettings::with_tol(1e-6);
    let (mut gap, mut viol, mut converged, mut max_iters) = (0.0f64, 0.0f64, 0, 0);
    for _ in 0..50 {
        let nx = rng.random_range(1..=6);
        let nu = rng.random_range(1..=3);
        let nc = rng.random_range(1..=3);
        let n = rng.random_range(2..=(400 - nx) / (nx + nu)).min(40);
        let qp = random_ltv_qp(&mut rng, nx, nu, nc, n);
        let dense = reference::dense_qp(&reference::flatten_qp(&qp)).expect("dense QP");
        let (dx, du) = reference::unflatten(&qp, &dense.x);
        let expected = qp.objective(&dx, &du);
        let got = admm::solve_qp(&qp, &settings, None, &Executor::Sequential).expect("ADMM");
        let objective = qp.objective(&got.solution.dx, &got.solution.du);
        gap = gap.max((objective - expected).abs() / expected.abs().max(1.0));
        viol = viol.max(violation(&qp, &got.solution.dx, &got.solution.du));
        converged += (got.stats.converged && got.stats.iterations <= 4000) as usize;
        max_iters = max_iters.max(got.stats.iterations);
    }
    verdict(
        gap <= 1e-4 && viol <= 1e-6 && converged == 50,
        format!("max rel objective gap {gap:.2e} (≤ 1e-4), violation {viol:.2e} (≤ 1e-6), converged {converged}/50, max {max_iters} iterations"),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut residual, mut exact) = (0.0f64, 0.0f64, true);
    for _ in 0..20 {
        let nx = rng.random_range(1..=6);
        let nu = rng.random_range(1..=3);
        let nc = rng.random_range(0..=2);
        let n = rng.random_range(1..=32);
        let qp = random_ltv_qp(&mut rng, nx, nu, nc, n);
        let e: Vec<Mat> = (0..n).map(|_| normal_mat(&mut rng, nx, nx) * 0.1).collect();
        let costs = sls::assemble_costs(&SlsDuals::zeros(&qp), &qp, &SlsWeights::identity(nx, nu));
        let got = sls::synthesize(&qp, &e, &costs, &Executor::Sequential).expect("synthesis");
        let expected = reference::fastsls_sequential(&qp, &e, &costs).expect("recursions");
        for j in 0..n {
            for k in j + 1..=n {
                worst = worst.max(rel_err(got.phi_x(k, j).unwrap(), expected.phi_x(k, j).unwrap()));
                if k < n {
                    worst = worst.max(rel_err(got.phi_u(k, j).unwrap(), expected.phi_u(k, j).unwrap()));
                }
            }
            exact &= same_bits(got.phi_x(j + 1, j).unwrap().as_slice(), e[j].as_slice());
        }
        residual = residual.max(got.dynamics_residual(&qp));
    }
    verdict(
        worst <= 1e-8 && residual <= 1e-8 && exact,
        format!("max rel error {worst:.2e} (≤ 1e-8), dynamics residual {residual:.2e} (≤ 1e-8), first response equals E exactly: {exact}"),
    )
}

fn criterion_5() -> Verdict {
    let p = scenario("dubins_robust.json");
    let e_ok = p.ocp.model.disturbance(&p.x0) == Mat::identity(3, 3) * 2.5e-2;
    let total: usize = p.mix.iter().map(|(_, c)| c).sum();
    let kinds = format!("{:?}", p.mix.iter().map(|(k, c)| (k.as_str(), *c)).collect::<Vec<_>>());
    let guess = cli::initial_guess(&p).expect("guess");
    let exec = Executor::Sequential;
    let plan = solve_robust(&p.ocp, &p.x0, &p.robust, &guess, &exec).expect("robust solve");
    let records =
        run_rollouts(&p.ocp, &plan.nominal.traj, &plan.response, &plan.tightening, &p.mix, p.seed, &exec).expect("rollouts");
    let safety = rollout::safety_rate(records.iter().map(|r| &r.safe));
    // Independent of the recorded margins: re-evaluate g on every realized stage.
    let mut worst_g = f64::NEG_INFINITY;
    for r in &records {
        for k in 0..r.u.len() {
            worst_g = worst_g.max(p.ocp.constraints.stage(&r.x[k], &r.u[k]).max());
        }
        let terminal = p.ocp.constraints.terminal(r.x.last().unwrap());
        if !terminal.is_empty() {
            worst_g = worst_g.max(terminal.max());
        }
    }
    verdict(
        e_ok && total == 100 && safety == 1.0 && worst_g <= 1e-3,
        format!("{total} rollouts {kinds}, E = 2.5e-2·I: {e_ok}, safety rate {safety:.3} (= 1), max g {worst_g:.2e} (≤ 1e-3)"),
    )
}

fn criterion_6() -> Verdict {
    let p = scenario("quadrotor_compare.json");
    let steps = match p.campaign {
        cli::CampaignSpec::Mpc { steps } => steps,
        ref other => panic!("quadrotor scenario must be an MPC campaign, found {other:?}"),
    };
    let exec = Executor::Sequential;
    let campaign = |mode: Mode| {
        rollout::run_mpc_campaign(
            || cli::controller(&p, &p.ocp, mode),
            p.ocp.model.as_ref(),
            &p.ocp.constraints,
            &p.x0,
            steps,
            &p.mix,
            p.seed,
            &exec,
        )
        .expect("campaign")
    };
    let robust = campaign(Mode::Robust);
    let nominal = campaign(Mode::Nominal);
    let robust_rate = rollout::safety_rate(robust.iter().map(|r| &r.safe));
    let adversarial: Vec<_> = nominal.iter().filter(|r| r.kind == DisturbanceKind::Adversarial).collect();
    let nominal_adv = rollout::safety_rate(adversarial.iter().map(|r| &r.safe));
    let nominal_rate = rollout::safety_rate(nominal.iter().map(|r| &r.safe));
    verdict(
        robust.len() == 31 && robust_rate == 1.0 && !adversarial.is_empty() && nominal_adv < 1.0,
        format!(
            "{} rollouts: robust safety {robust_rate:.3} (= 1), nominal {nominal_rate:.3} overall, {nominal_adv:.3} on {} adversarial (< 1)",
            robust.len(),
            adversarial.len()
        ),
    )
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let exec = Executor::Sequential;
    let mut depths = Vec::new();
    let mut layers_ok = true;
    for n in [31usize, 255, 1023, 2999] {
        let qp = random_ltv_qp(&mut rng, 2, 1, 0, n);
        let s = lqr::solve(&qp, &exec).expect("LQR");
        let expected = 2 * (n + 1).next_power_of_two().trailing_zeros() as usize;
        layers_ok &= s.value_layers == expected;
        depths.push(format!("N={n}: {} (expected {expected})", s.value_layers));
    }

    let qp = random_ltv_qp(&mut rng, 8, 4, 0, 2048);
    let time = |exec: &Executor| {
        let mut samples: Vec<f64> = (0..5)
            .map(|_| {
                let started = Instant::now();
                lqr::solve(&qp, exec).expect("LQR");
                started.elapsed().as_secs_f64()
            })
            .collect();
        samples.sort_by(f64::total_cmp);
        samples[2]
    };
    let seq = time(&Executor::Sequential);
    let par = time(&Executor::parallel(8).expect("pool"));
    let ratio = par / seq;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let detail = format!("layers {}; N=2048 parallel(8)/sequential = {ratio:.2} (≤ 0.6) on {cores} core(s)", depths.join(", "));
    if !layers_ok || (cores >= 8 && ratio > 0.6) {
        Verdict::Fail(detail)
    } else if ratio > 0.6 {
        Verdict::Unattainable(format!("{detail}; timing bound needs ≥ 8 hardware threads"))
    } else {
        Verdict::Pass(detail)
    }
}

fn criterion_8() -> Verdict {
    const UMAX: f64 = 2.0;
    let pendulum = Pendulum::new(2, 0.01).expect("pendulum");
    let up = pendulum.upright();
    let model = Arc::new(pendulum);
    let ocp = Ocp {
        model: model.clone(),
        constraints: Constraints::input_box(Vector::from_element(2, -UMAX), Vector::from_element(2, UMAX)),
        cost: TrackingCost::diagonal(&[10.0, 10.0, 1.0, 1.0], &[0.01, 0.01], &[100.0, 100.0, 10.0, 10.0], up.clone(), Vector::zeros(2)),
        horizon: 64,
    };
    let mut x0 = up.clone();
    x0[0] += 0.1;
    x0[1] -= 0.1;
    let mut controller = NominalMpc::new(ocp.clone(), SqpSettings::default(), false);
    let mut source = Disturbance::new(DisturbanceKind::UniformBall, 8, 0);
    let record = run_mpc(&mut controller, model.as_ref(), &ocp.constraints, &x0, 200, &mut source, 0, &Executor::Sequential)
        .expect("closed loop");
    let converged = record.steps.iter().filter(|s| s.converged && s.kkt_residual <= 1e-2 && s.sqp_iters <= 30).count();
    let max_iters = record.steps.iter().map(|s| s.sqp_iters).max().unwrap_or(0);
    let worst_kkt = record.steps.iter().map(|s| s.kkt_residual).fold(0.0, f64::max);
    let peak = record.u.iter().map(|u| u.amax()).fold(0.0, f64::max);
    let saturated = record.u.iter().filter(|u| u.amax() >= UMAX - 1e-3).count();
    verdict(
        record.steps.len() == 200 && converged == 200 && peak <= UMAX + 1e-2,
        format!(
            "{converged}/200 steps converged, worst residual {worst_kkt:.2e} (≤ 1e-2), max {max_iters} SQP iterations (≤ 30), \
             peak torque {peak:.4} (≤ {UMAX} + 1e-2), {saturated} steps at the bound"
        ),
    )
}

fn criterion_9() -> Verdict {
    let pendulum = Pendulum::new(4, 0.01).expect("pendulum");
    let up = pendulum.upright();
    let model: Arc<dyn Model> = Arc::new(pendulum);
    let n = 3000;
    let ocp = Ocp {
        model: model.clone(),
        constraints: Constraints::input_box(Vector::from_element(4, -50.0), Vector::from_element(4, 50.0)),
        cost: TrackingCost::diagonal(
            &[10.0, 10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0],
            &[0.01; 4],
            &[100.0, 100.0, 100.0, 100.0, 10.0, 10.0, 10.0, 10.0],
            up.clone(),
            Vector::zeros(4),
        ),
        horizon: n,
    };
    let mut x0 = up.clone();
    for i in 0..4 {
        x0[i] += if i % 2 == 0 { 0.05 } else { -0.05 };
    }
    let settings = SqpSettings::default();
    let guess = Trajectory::constant(&x0, &Vector::zeros(4), n, 0.01);
    let exec = Executor::parallel(std::thread::available_parallelism().map_or(8, |c| c.get()).max(8)).expect("pool");
    let started = Instant::now();
    let result = solve_nmpc(&ocp, &x0, &settings, &guess, None, None, &exec).expect("large solve");
    let secs = started.elapsed().as_secs_f64();
    let traj = &result.traj;
    let mut defect = 0.0f64;
    for k in 0..n {
        let next = model.step(&traj.x[k], &traj.u[k]).expect("step");
        defect = defect.max((next - &traj.x[k + 1]).amax());
    }
    let x0_exact = same_bits(traj.x[0].as_slice(), x0.as_slice());
    let states = (n + 1) * 8;
    verdict(
        secs <= 60.0 && x0_exact && defect <= 10.0 * settings.kkt_tol,
        format!(
            "{states} states in {secs:.2} s (≤ 60 s), {} SQP iterations, defect {defect:.2e} (≤ {:.0e}), initial state exact: {x0_exact}",
            result.stats.iterations,
            10.0 * settings.kkt_tol
        ),
    )
}

fn cvf_rel(a: &CvfElement, b: &CvfElement) -> f64 {
    let v = |x: &Vector, y: &Vector| (x - y).amax() / y.amax().max(1.0);
    rel_err(&a.p, &b.p).max(rel_err(&a.a, &b.a)).max(rel_err(&a.c, &b.c)).max(v(&a.p_lin, &b.p_lin)).max(v(&a.b, &b.b))
}

fn cvf_bits(a: &CvfElement, b: &CvfElement) -> bool {
    same_bits(a.p.as_slice(), b.p.as_slice())
        && same_bits(a.p_lin.as_slice(), b.p_lin.as_slice())
        && same_bits(a.a.as_slice(), b.a.as_slice())
        && same_bits(a.c.as_slice(), b.c.as_slice())
        && same_bits(a.b.as_slice(), b.b.as_slice())
}

fn criterion_10() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pool = Executor::parallel(4).expect("pool");
    let mut exact = true;
    for n in (1..=70).chain([127, 128, 129, 1000]) {
        let items: Vec<i64> = (0..n).map(|_| rng.random_range(-1000..1000)).collect();
        let mut prefix = items.clone();
        for i in 1..n {
            prefix[i] += prefix[i - 1];
        }
        let mut suffix = items.clone();
        for i in (0..n.saturating_sub(1)).rev() {
            suffix[i] += suffix[i + 1];
        }
        // Word concatenation is associative but not commutative, so order errors show.
        let words: Vec<String> = items.iter().map(|v| format!("{v},")).collect();
        let concat_prefix: Vec<String> = (0..n).map(|i| words[..=i].concat()).collect();
        for exec in [&Executor::Sequential, &pool] {
            let fwd = inclusive_scan(items.clone(), |a, b| a + b, Direction::Forward, exec).unwrap();
            let bwd = inclusive_scan(items.clone(), |a, b| a + b, Direction::Reverse, exec).unwrap();
            let cat = inclusive_scan(words.clone(), |a, b| format!("{a}{b}"), Direction::Forward, exec).unwrap();
            exact &= fwd.values == prefix && bwd.values == suffix && cat.values == concat_prefix;
        }
    }

    let mut assoc = 0.0f64;
    let mut neutral = true;
    for i in 0..200 {
        let nx = 1 + i % 6;
        let (a, b, c) = (random_cvf(&mut rng, nx), random_cvf(&mut rng, nx), random_cvf(&mut rng, nx));
        let left = combine_cvf(&combine_cvf(&a, &b).unwrap(), &c).unwrap();
        let right = combine_cvf(&a, &combine_cvf(&b, &c).unwrap()).unwrap();
        assoc = assoc.max(cvf_rel(&left, &right));
        neutral &= cvf_bits(&combine_cvf(&a, &CvfElement::neutral(nx)).unwrap(), &a);
    }
    verdict(
        exact && assoc <= 1e-9 && neutral,
        format!("integer and word scans exact: {exact}, CVF associativity {assoc:.2e} (≤ 1e-9), right neutral exact: {neutral}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("1 scan LQR matches Riccati", criterion_1),
        ("2 cached LQR replay is exact", criterion_2),
        ("3 ADMM matches interior point", criterion_3),
        ("4 response synthesis matches recursions", criterion_4),
        ("5 Dubins robust rollouts all safe", criterion_5),
        ("6 quadrotor robust beats nominal", criterion_6),
        ("7 logarithmic scan depth", criterion_7),
        ("8 pendulum NMPC converges", criterion_8),
        ("9 large pendulum solve", criterion_9),
        ("10 scan unit suite", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.split(' ').next() == Some(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| Verdict::Fail(format!("panicked: {}", e.downcast_ref::<String>().cloned().unwrap_or_default())));
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Verdict::Pass(d) => println!("PASS criterion {name}: {d} [{secs:.1} s]"),
            Verdict::Fail(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d} [{secs:.1} s]");
            }
            Verdict::Unattainable(d) => println!("FAIL criterion {name} (hardware): {d} [{secs:.1} s]"),
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
