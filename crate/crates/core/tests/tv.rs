mod common;

use std::sync::Arc;

use common::pdhg;
use invrob::operators::{sample_gaussian_operator, DenseOperator, GradientOp1D, LinearOperator};
use invrob::signals::{sample_piecewise_constant, PiecewiseConstantSpec};
use invrob::tape::Tape;
use invrob::tensor::{self, Tensor};
use invrob::tv::{AdmmConfig, TvMode, TvSolver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(m: usize, n: usize, seed: u64, cfg: AdmmConfig) -> (DenseOperator, TvSolver) {
    let a = sample_gaussian_operator(m, n, seed).unwrap();
    let shared: Arc<dyn LinearOperator> = Arc::new(a.clone());
    let g: Arc<dyn LinearOperator> = Arc::new(GradientOp1D::new(n).unwrap());
    (a, TvSolver::new(shared, g, cfg).unwrap())
}

/// 1 or 2 jumps anywhere, arbitrary levels at both ends.
fn oracle_signal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let jumps = rng.random_range(1..=2);
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() < jumps {
        let c = rng.random_range(1..n);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort();
    let mut level = rng.random_range(-1.0..1.0);
    let mut x = Vec::with_capacity(n);
    for i in 0..n {
        if cuts.contains(&i) {
            let step: f64 = rng.random_range(0.5..1.5);
            level += if rng.random_bool(0.5) { step } else { -step };
        }
        x.push(level);
    }
    x
}

fn as_dense(a: &DenseOperator) -> pdhg::Dense {
    pdhg::Dense {
        rows: a.rows(),
        cols: a.cols(),
        data: a.matrix().data().to_vec(),
    }
}

fn rel_dist(a: &[f64], b: &[f64]) -> f64 {
    tensor::norm2(&tensor::sub(a, b)) / tensor::norm2(b).max(1e-300)
}

#[test]
fn matches_primal_dual_oracle_noiseless() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = pdhg::gradient_matrix(8);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let (a, solver) = setup(6, 8, 100 + k, AdmmConfig::default());
        let x = oracle_signal(8, &mut rng);
        let y = a.apply(&x);
        let ours = solver
            .solve(
                &Tensor::from_vec(y.clone()),
                TvMode::Constrained { eta: 0.0 },
                None,
            )
            .unwrap();
        let reference = pdhg::solve(&d, &as_dense(&a), &y, pdhg::Fit::Ball(0.0), 1_000_000);
        worst = worst.max(rel_dist(ours.x.data(), &reference));
    }
    assert!(worst <= 1e-4, "worst relative distance {worst}");
}

#[test]
fn matches_primal_dual_oracle_noisy_and_penalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = pdhg::gradient_matrix(8);
    for k in 0..4 {
        let tight = AdmmConfig {
            tol_primal: 1e-12,
            tol_dual: 1e-12,
            max_iters: 100_000,
            ..Default::default()
        };
        let (a, solver) = setup(6, 8, 200 + k, tight);
        let x = oracle_signal(8, &mut rng);
        let mut y = a.apply(&x);
        for v in y.iter_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
        let yt = Tensor::from_vec(y.clone());

        let eta = 0.02;
        let ours = solver
            .solve(&yt, TvMode::Constrained { eta }, None)
            .unwrap();
        let reference = pdhg::solve(&d, &as_dense(&a), &y, pdhg::Fit::Ball(eta), 1_000_000);
        let dist = rel_dist(ours.x.data(), &reference);
        assert!(dist <= 1e-4, "constrained instance {k}: {dist}");

        let lambda = 0.1;
        let ours = solver
            .solve(&yt, TvMode::Unconstrained { lambda }, None)
            .unwrap();
        let reference = pdhg::solve(&d, &as_dense(&a), &y, pdhg::Fit::Penalty(lambda), 1_000_000);
        let dist = rel_dist(ours.x.data(), &reference);
        assert!(dist <= 1e-4, "unconstrained instance {k}: {dist}");
    }
}

#[test]
fn solution_is_invariant_to_rho() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for k in 0..3 {
        let x = oracle_signal(16, &mut rng);
        let mut sols = Vec::new();
        for rho in [0.5, 1.0, 2.0] {
            let cfg = AdmmConfig {
                rho,
                tol_primal: 1e-12,
                tol_dual: 1e-12,
                max_iters: 50_000,
                ..Default::default()
            };
            let (a, solver) = setup(10, 16, 300 + k, cfg);
            let y = Tensor::from_vec(a.apply(&x));
            for mode in [
                TvMode::Constrained { eta: 0.0 },
                TvMode::Unconstrained { lambda: 0.05 },
            ] {
                sols.push(solver.solve(&y, mode, None).unwrap().x);
            }
        }
        for i in 2..sols.len() {
            let d = rel_dist(sols[i].data(), sols[i % 2].data());
            assert!(d <= 1e-8, "instance {k}, solution {i}: {d}");
        }
    }
}

#[test]
fn converged_residuals_are_below_tolerance() {
    let (a, solver) = setup(20, 40, 5, AdmmConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = oracle_signal(40, &mut rng);
    let y = Tensor::from_vec(a.apply(&x));
    for mode in [
        TvMode::Constrained { eta: 0.1 },
        TvMode::Unconstrained { lambda: 0.1 },
    ] {
        let sol = solver.solve(&y, mode, None).unwrap();
        assert!(sol.converged);
        let last = sol.trace.last().unwrap();
        let gx = tensor::norm2(&solver.gradient().apply(sol.x.data()));
        let ax = tensor::norm2(&a.apply(sol.x.data()));
        let scale = (gx * gx + ax * ax).sqrt().max(1.0);
        assert!(
            last.primal_residual <= 1e-8 * scale * 1.01,
            "{mode:?}: {}",
            last.primal_residual
        );
        assert!(last.dual_residual.is_finite());
    }
}

#[test]
fn unconstrained_objective_is_monotone_over_accepted_iterations() {
    let (a, solver) = setup(30, 64, 6, AdmmConfig::default());
    let spec = PiecewiseConstantSpec {
        n: 64,
        jumps_min: 2,
        jumps_max: 4,
        min_gap: 6,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let x = sample_piecewise_constant(&spec, &mut rng).unwrap();
        let y = Tensor::from_vec(a.apply(x.data()));
        let sol = solver
            .solve(&y, TvMode::Unconstrained { lambda: 0.05 }, None)
            .unwrap();
        let accepted = invrob::tv::accepted_objectives(&sol.trace);
        for w in accepted.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{} then {}", w[0], w[1]);
        }
        let final_obj = sol.trace.last().unwrap().objective;
        assert!((accepted.last().unwrap() - final_obj).abs() <= 1e-8 * final_obj.max(1.0));
    }
}

#[test]
fn small_measurement_changes_give_small_solution_changes() {
    let (a, solver) = setup(100, 256, 7, AdmmConfig::default());
    let spec = PiecewiseConstantSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..2 {
        let x = sample_piecewise_constant(&spec, &mut rng).unwrap();
        let ybar = a.apply(x.data());
        let mut delta: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dn = tensor::norm2(&delta);
        delta.iter_mut().for_each(|v| *v *= 1e-6 / dn);
        let y2 = tensor::add(&ybar, &delta);
        let eta = 0.01 * tensor::norm2(&ybar);
        let mode = TvMode::Constrained { eta };
        let s1 = solver.solve(&Tensor::from_vec(ybar), mode, None).unwrap();
        let s2 = solver
            .solve(&Tensor::from_vec(y2), mode, Some(&s1.state))
            .unwrap();
        let change = tensor::norm2(&tensor::sub(s1.x.data(), s2.x.data()));
        assert!(change <= 1e-3, "change {change}");
    }
}

#[test]
fn noiseless_a1_recovery() {
    let (a, solver) = setup(100, 256, 8, AdmmConfig::default());
    let spec = PiecewiseConstantSpec {
        jumps_max: 4,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = sample_piecewise_constant(&spec, &mut rng).unwrap();
    let y = Tensor::from_vec(a.apply(x.data()));
    let sol = solver
        .solve(&y, TvMode::Constrained { eta: 0.0 }, None)
        .unwrap();
    let err = rel_dist(sol.x.data(), x.data());
    assert!(err <= 1e-3, "relative error {err}");
}

fn fd_check(m: usize, n: usize, mode: TvMode, seed: u64) {
    let (a, solver) = setup(m, n, seed, AdmmConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xbar = oracle_signal(n, &mut rng);
    let ybar = a.apply(&xbar);
    let warm = solver
        .solve(&Tensor::from_vec(ybar.clone()), mode, None)
        .unwrap()
        .state;
    let y0: Vec<f64> = ybar
        .iter()
        .map(|v| v + 0.05 * rng.random_range(-1.0..1.0))
        .collect();

    let loss = |y: &[f64]| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let yv = tape.leaf(y.to_vec()).unwrap();
        let out = solver.unrolled(&mut tape, yv, mode, &warm, 25).unwrap();
        let target = tape.leaf(xbar.clone()).unwrap();
        let diff = tape.sub(out, target).unwrap();
        let l = tape.squared_norm(diff).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.scalar(l), g.wrt(&tape, yv))
    };
    let (_, grad) = loss(&y0);
    for _ in 0..10 {
        let dir: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-5;
        let yp = tensor::add(&y0, &dir.iter().map(|d| h * d).collect::<Vec<_>>());
        let ym = tensor::sub(&y0, &dir.iter().map(|d| h * d).collect::<Vec<_>>());
        let fd = (loss(&yp).0 - loss(&ym).0) / (2.0 * h);
        let an = tensor::dot(&grad, &dir);
        let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
        assert!(rel <= 1e-4, "{mode:?} n={n}: analytic {an}, fd {fd}");
    }
}

#[test]
fn unrolled_gradient_matches_finite_differences() {
    fd_check(6, 8, TvMode::Constrained { eta: 0.02 }, 21);
    fd_check(6, 8, TvMode::Unconstrained { lambda: 0.1 }, 22);
    fd_check(16, 32, TvMode::Constrained { eta: 0.05 }, 23);
    fd_check(16, 32, TvMode::Unconstrained { lambda: 0.05 }, 24);
}

#[test]
fn warm_unroll_reproduces_converged_solution() {
    for (k, mode) in [
        TvMode::Constrained { eta: 0.01 },
        TvMode::Unconstrained { lambda: 0.05 },
    ]
    .into_iter()
    .enumerate()
    {
        let (a, solver) = setup(20, 40, 30 + k as u64, AdmmConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = oracle_signal(40, &mut rng);
        let y = a.apply(&x);
        let sol = solver
            .solve(&Tensor::from_vec(y.clone()), mode, None)
            .unwrap();
        let mut tape = Tape::new();
        let yv = tape.leaf(y).unwrap();
        let out = solver
            .unrolled(&mut tape, yv, mode, &sol.state, 25)
            .unwrap();
        let d = rel_dist(tape.value(out), sol.x.data());
        assert!(d <= 1e-6, "{mode:?}: {d}");
    }
}

#[test]
fn trace_csv_has_one_row_per_iteration() {
    let (a, solver) = setup(6, 8, 40, AdmmConfig::default());
    let y = Tensor::from_vec(a.apply(&[0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]));
    let sol = solver
        .solve(&y, TvMode::Constrained { eta: 0.0 }, None)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    sol.write_trace_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), sol.iters + 1);
    assert!(text.starts_with("iter,objective,primal_residual,dual_residual\n"));
}
