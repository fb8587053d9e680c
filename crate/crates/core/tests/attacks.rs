use std::sync::Arc;

use invrob::attacks::{
    find_adversarial, margin, margin_attack, transfer_eval, AttackConfig, Pipeline,
};
use invrob::nets::{classifier_train, ClassifierConfig};
use invrob::operators::{sample_gaussian_operator, DenseOperator, GradientOp1D, LinearOperator};
use invrob::recon::{MatrixRecon, ReconMap, ReconSession, TvRecon};
use invrob::signals::{sample_signals, PiecewiseConstantSpec};
use invrob::tape::{Tape, Var};
use invrob::tensor::{self, Tensor};
use invrob::tv::{AdmmConfig, TvMode, TvSolver};
use invrob::Error;

fn linear_toy() -> (MatrixRecon, DenseOperator, Tensor) {
    let b = Arc::new(Tensor::new(vec![2, 2], vec![1.3, -0.4, 0.7, 0.2]).unwrap());
    let a = DenseOperator::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    (
        MatrixRecon::new("lin", b).unwrap(),
        a,
        Tensor::from_vec(vec![0.6, -1.1]),
    )
}

fn small_tv(eta: f64) -> (TvRecon, DenseOperator, Vec<Tensor>) {
    let (m, n) = (16, 32);
    let a = sample_gaussian_operator(m, n, 3).unwrap();
    let shared: Arc<dyn LinearOperator> = Arc::new(a.clone());
    let g: Arc<dyn LinearOperator> = Arc::new(GradientOp1D::new(n).unwrap());
    let cfg = AdmmConfig {
        tol_primal: 1e-6,
        tol_dual: 1e-6,
        ..Default::default()
    };
    let solver = Arc::new(TvSolver::new(shared, g, cfg).unwrap());
    let rec = TvRecon::new("tv", solver, TvMode::Constrained { eta });
    let spec = PiecewiseConstantSpec {
        n,
        jumps_min: 1,
        jumps_max: 2,
        min_gap: 4,
        ..Default::default()
    };
    (rec, a, sample_signals(&spec, 3, 5).unwrap())
}

#[test]
fn linear_map_matches_boundary_search() {
    let (rec, a, x) = linear_toy();
    let eta = 0.5;
    let ybar = a.apply(x.data());
    let mut best = 0.0f64;
    let k = 100_000;
    for i in 0..k {
        let t = std::f64::consts::TAU * i as f64 / k as f64;
        let y = [ybar[0] + eta * t.cos(), ybar[1] + eta * t.sin()];
        let xr = rec.reconstruct(&y).unwrap();
        best = best.max(tensor::norm2(&tensor::sub(&xr, x.data())) / x.norm());
    }
    let cfg = AttackConfig {
        eta,
        seed: 4,
        ..Default::default()
    };
    let r = find_adversarial(&rec, &a, &x, &cfg, &[]).unwrap();
    assert!(
        (r.achieved_error - best).abs() <= 1e-3,
        "attack {} vs search {best}",
        r.achieved_error
    );
}

#[test]
fn empty_budget_gives_baseline() {
    let (rec, a, xs) = small_tv(0.0);
    let cfg = AttackConfig::default();
    let r = find_adversarial(&rec, &a, &xs[0], &cfg, &[]).unwrap();
    assert!(r.e_adv.data().iter().all(|&v| v == 0.0));
    let base = transfer_eval(&Tensor::zeros(&[16]), &rec, &a, &xs[0]).unwrap();
    assert_eq!(r.achieved_error, base);
}

#[test]
fn more_restarts_never_lower_the_result() {
    let (rec, a, x) = linear_toy();
    let mut prev = f64::NEG_INFINITY;
    let mut prev_rows: Vec<f64> = Vec::new();
    for restarts in 1..=5 {
        let cfg = AttackConfig {
            eta: 0.4,
            steps: 40,
            restarts,
            include_zero_init: false,
            seed: 9,
            ..Default::default()
        };
        let r = find_adversarial(&rec, &a, &x, &cfg, &[]).unwrap();
        let rows = r.per_restart_errors();
        assert_eq!(&rows[..prev_rows.len()], &prev_rows[..]);
        assert!(r.achieved_error >= prev);
        prev = r.achieved_error;
        prev_rows = rows;
    }
}

#[test]
fn tv_attacks_are_feasible_dominant_and_deterministic() {
    let eta_rel = 0.05;
    for (i, x) in small_tv(0.0).2.iter().enumerate() {
        let (_, a, _) = small_tv(0.0);
        let eta = eta_rel * tensor::norm2(&a.apply(x.data()));
        let (rec, _, _) = small_tv(eta);
        let cfg = AttackConfig {
            eta,
            steps: 30,
            restarts: 2,
            seed: i as u64,
            ..Default::default()
        };
        let r = find_adversarial(&rec, &a, x, &cfg, &[]).unwrap();
        assert!(r.e_adv.norm() <= eta * (1.0 + 1e-9));
        let base = transfer_eval(&Tensor::zeros(&[16]), &rec, &a, x).unwrap();
        assert!(r.achieved_error >= base);
        assert_eq!(
            transfer_eval(&r.e_adv, &rec, &a, x).unwrap(),
            r.achieved_error
        );
        let again = find_adversarial(&rec, &a, x, &cfg, &[]).unwrap();
        assert_eq!(again, r);
    }
}

#[test]
fn larger_budget_with_reused_winner_does_not_decrease() {
    let (rec, a, x) = linear_toy();
    let mut prev: Option<Tensor> = None;
    let mut prev_err = f64::NEG_INFINITY;
    for eta in [0.05, 0.1, 0.2, 0.4] {
        let cfg = AttackConfig {
            eta,
            steps: 20,
            restarts: 1,
            seed: 2,
            ..Default::default()
        };
        let inits: Vec<Tensor> = prev.iter().cloned().collect();
        let r = find_adversarial(&rec, &a, &x, &cfg, &inits).unwrap();
        assert!(r.achieved_error >= prev_err);
        prev_err = r.achieved_error;
        prev = Some(r.e_adv);
    }
}

#[test]
fn margin_at_zero_is_direct_evaluation() {
    let spec = PiecewiseConstantSpec {
        n: 16,
        jumps_min: 1,
        jumps_max: 2,
        min_gap: 3,
        ..Default::default()
    };
    let xs = sample_signals(&spec, 12, 1).unwrap();
    let labels: Vec<usize> = (0..xs.len()).map(|i| i % 2).collect();
    let clf = classifier_train(
        &xs,
        &labels,
        &ClassifierConfig {
            epochs: 5,
            batch_size: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let id = Arc::new(
        Tensor::new(
            vec![16, 16],
            (0..256).map(|i| f64::from(i % 17 == 0)).collect(),
        )
        .unwrap(),
    );
    let rec = MatrixRecon::new("id", id.clone()).unwrap();
    let a = DenseOperator::new((*id).clone()).unwrap();
    let pipe = Pipeline {
        rec: &rec,
        classifier: &clf,
    };
    let cfg = AttackConfig::default();
    for (x, &c) in xs.iter().zip(&labels) {
        let logits = clf.logits(x).unwrap();
        let r = margin_attack(&pipe, &a, x, c, &cfg, &[]).unwrap();
        assert_eq!(r.attack.achieved_error, margin(&logits, c));
        let mut sorted = logits.clone();
        sorted.sort_by(|p, q| q.partial_cmp(p).unwrap());
        let expected = if sorted[0] == logits[c] {
            sorted[1] - logits[c]
        } else {
            sorted[0] - logits[c]
        };
        assert_eq!(r.attack.achieved_error, expected);
        assert_eq!(r.flipped, r.predicted != c);
    }
}

#[test]
fn transfer_of_zero_is_baseline() {
    let (rec, a, x) = linear_toy();
    let xr = rec.reconstruct(&a.apply(x.data())).unwrap();
    let base = tensor::norm2(&tensor::sub(&xr, x.data())) / x.norm();
    assert_eq!(
        transfer_eval(&Tensor::zeros(&[2]), &rec, &a, &x).unwrap(),
        base
    );
}

struct Failing;

struct FailingSession(usize);

impl ReconSession for FailingSession {
    fn record(&mut self, _tape: &mut Tape, y: Var) -> invrob::Result<Var> {
        self.0 += 1;
        if self.0 > 3 {
            return Err(Error::Contract("boom".into()));
        }
        Ok(y)
    }
}

impl ReconMap for Failing {
    fn name(&self) -> &str {
        "failing"
    }
    fn measurement_dim(&self) -> usize {
        2
    }
    fn signal_dim(&self) -> usize {
        2
    }
    fn reconstruct(&self, y: &[f64]) -> invrob::Result<Vec<f64>> {
        Ok(y.to_vec())
    }
    fn session(&self, _y0: &[f64]) -> invrob::Result<Box<dyn ReconSession + '_>> {
        Ok(Box::new(FailingSession(0)))
    }
}

#[test]
fn failures_name_restart_and_step() {
    let (_, a, x) = linear_toy();
    let cfg = AttackConfig {
        eta: 0.1,
        include_zero_init: true,
        ..Default::default()
    };
    let err = find_adversarial(&Failing, &a, &x, &cfg, &[]).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Attack {
                restart: 0,
                step: 3,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn csv_has_one_row_per_restart() {
    let (rec, a, x) = linear_toy();
    let cfg = AttackConfig {
        eta: 0.2,
        steps: 10,
        ..Default::default()
    };
    let r = find_adversarial(&rec, &a, &x, &cfg, &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/attack.csv");
    r.write_csv(&path).unwrap();
    let mut rd = csv::Reader::from_path(&path).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), r.per_restart.len());
    let values: Vec<f64> = rows.iter().map(|row| row[2].parse().unwrap()).collect();
    assert_eq!(values, r.per_restart_errors());
    assert_eq!(rows.iter().filter(|row| &row[4] == "1").count() >= 1, true);
}
