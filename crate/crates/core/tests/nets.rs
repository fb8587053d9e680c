use std::sync::Arc;

use invrob::nets::{train, ConvBlockSpec, NetKind, ReconNet, TrainConfig};
use invrob::operators::{sample_gaussian_operator, GradientOp1D, LinearOperator, TikhonovInverse};
use invrob::signals::{sample_signals, PiecewiseConstantSpec};
use invrob::tape::Tape;
use invrob::tensor::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(kind: NetKind, seed: u64) -> ReconNet {
    let a: Arc<dyn LinearOperator> = Arc::new(sample_gaussian_operator(16, 32, 5).unwrap());
    let g = GradientOp1D::new(32).unwrap();
    let t = TikhonovInverse::new(a.as_ref(), &g, 0.02).unwrap();
    let spec = ConvBlockSpec {
        levels: 2,
        channels: vec![3, 4],
    };
    ReconNet::new(kind, a, &t, spec, 3, seed).unwrap()
}

/// Perturbs every parameter so that no layer is trivially zero.
fn randomize(net: &mut ReconNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = net.params().flatten();
    for v in flat.iter_mut() {
        *v += 0.2 * rng.random_range(-1.0..1.0);
    }
    net.params_mut().set_flat(&flat).unwrap();
}

fn loss_and_grads(net: &ReconNet, y: &[f64], target: &[f64]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let yv = tape.leaf(y.to_vec()).unwrap();
    let p = net.params().leaves(&mut tape).unwrap();
    let out = net.record(&mut tape, yv, &p).unwrap();
    let t = tape.leaf(target.to_vec()).unwrap();
    let d = tape.sub(out, t).unwrap();
    let l = tape.squared_norm(d).unwrap();
    let g = tape.backward(l).unwrap();
    (
        tape.scalar(l),
        g.wrt(&tape, yv),
        p.iter().map(|&v| g.wrt(&tape, v)).collect(),
    )
}

fn loss_at(net: &ReconNet, y: &[f64], target: &[f64]) -> f64 {
    loss_and_grads(net, y, target).0
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn measurement_gradients_match_finite_differences() {
    for (k, kind) in [NetKind::Postproc, NetKind::FullyLearned, NetKind::Iterative]
        .into_iter()
        .enumerate()
    {
        let mut net = toy(kind, 1);
        randomize(&mut net, 10 + k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(20 + k as u64);
        let y: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, gy, _) = loss_and_grads(&net, &y, &target);
        for _ in 0..10 {
            let dir: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = 1e-5;
            let yp: Vec<f64> = y.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
            let ym: Vec<f64> = y.iter().zip(&dir).map(|(a, d)| a - h * d).collect();
            let fd = (loss_at(&net, &yp, &target) - loss_at(&net, &ym, &target)) / (2.0 * h);
            let an = tensor::dot(&gy, &dir);
            assert!(rel(fd, an) <= 1e-5, "{kind:?}: analytic {an}, fd {fd}");
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for (k, kind) in [NetKind::Postproc, NetKind::FullyLearned, NetKind::Iterative]
        .into_iter()
        .enumerate()
    {
        let mut net = toy(kind, 2);
        randomize(&mut net, 30 + k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(40 + k as u64);
        let y: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, _, gp) = loss_and_grads(&net, &y, &target);
        let names: Vec<String> = net
            .params()
            .params()
            .iter()
            .map(|p| p.name.clone())
            .collect();
        for (gi, name) in names.iter().enumerate() {
            let dir: Vec<f64> = (0..gp[gi].len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let h = 1e-5;
            let shifted = |s: f64| {
                let mut n = net.clone();
                let p = n.params_mut().get_mut(name).unwrap();
                p.data.iter_mut().zip(&dir).for_each(|(v, d)| *v += s * d);
                loss_at(&n, &y, &target)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let an = tensor::dot(&gp[gi], &dir);
            assert!(
                rel(fd, an) <= 1e-5,
                "{kind:?} {name}: analytic {an}, fd {fd}"
            );
        }
    }
}

#[test]
fn fully_learned_starts_equal_to_postproc() {
    let mut fl = toy(NetKind::FullyLearned, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut post = toy(NetKind::Postproc, 3);
    for p in post.params_mut().params().to_vec() {
        let data: Vec<f64> = p
            .data
            .iter()
            .map(|v| v + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        post.params_mut().get_mut(&p.name).unwrap().data = data.clone();
        fl.params_mut().get_mut(&p.name).unwrap().data = data;
    }
    let y = Tensor::from_vec((0..16).map(|i| (i as f64 * 0.7).cos()).collect());
    assert_eq!(post.forward(&y).unwrap(), fl.forward(&y).unwrap());
}

fn small_problem() -> (ReconNet, Vec<Tensor>) {
    let net = toy(NetKind::Iterative, 4);
    let spec = PiecewiseConstantSpec {
        n: 32,
        jumps_min: 2,
        jumps_max: 3,
        min_gap: 4,
        ..Default::default()
    };
    (net, sample_signals(&spec, 24, 9).unwrap())
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (mut net, signals) = small_problem();
    let before = net.params().clone();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        lr: 0.0,
        ..Default::default()
    };
    train(&mut net, &signals, &cfg).unwrap();
    assert_eq!(net.params(), &before);
}

#[test]
fn weight_decay_shrinks_parameters() {
    let (net, signals) = small_problem();
    let run = |mu: f64| {
        let mut n = net.clone();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            lr: 1e-2,
            weight_decay: mu,
            jitter_bound: 0.1,
            seed: 1,
        };
        train(&mut n, &signals, &cfg).unwrap();
        n.params().squared_norm()
    };
    assert!(run(1e3) < run(0.0));
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let (net, signals) = small_problem();
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 8,
        lr: 3e-3,
        weight_decay: 1e-5,
        jitter_bound: 0.05,
        seed: 7,
    };
    let mut a = net.clone();
    let mut b = net.clone();
    let ra = train(&mut a, &signals, &cfg).unwrap();
    let rb = train(&mut b, &signals, &cfg).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(ra, rb);
    let first = ra.loss_history[0];
    let last = *ra.loss_history.last().unwrap();
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn thread_count_does_not_change_training() {
    let (net, signals) = small_problem();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 3e-3,
        jitter_bound: 0.05,
        seed: 3,
        ..Default::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let mut n = net.clone();
        pool.install(|| train(&mut n, &signals, &cfg)).unwrap();
        n.params().flatten()
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn nonfinite_inputs_are_reported_as_training_errors() {
    let (mut net, mut signals) = small_problem();
    signals[0].data_mut()[3] = f64::NAN;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..Default::default()
    };
    let err = train(&mut net, &signals, &cfg).unwrap_err();
    assert!(
        matches!(err, invrob::Error::Training { epoch: 0, .. }),
        "{err}"
    );
}
