use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use super::config::{
    AblationConfig, ClassifyConfig, ExperimentConfig, MethodConfig, ScenarioConfig,
};
use super::{
    fit_robustness_constant, gnuplot_script, noise_to_error_curve, summarize, transfer_records,
    write_points, write_records, AttackSummary, CurveContext, CurveFit, CurveNoise, CurvePoint,
    Method, Record,
};
use crate::attacks::{margin_attack, AttackConfig, Pipeline};
use crate::container::Container;
use crate::error::{config, Result};
use crate::nets::{classifier_train, train, Classifier, NetKind, ReconNet, TrainConfig};
use crate::operators::{
    sample_gaussian_operator, DenseOperator, GradientOp1D, LinearOperator, TikhonovInverse,
};
use crate::recon::{MatrixRecon, NetRecon, ReconMap, TvRecon};
use crate::rng;
use crate::signals::{jump_count, sample_signals};
use crate::tensor::{self, Tensor};
use crate::tv::{AdmmConfig, TvMode, TvSolver};

/// Operator, regularizers and data of a scenario.
#[derive(Debug, Clone)]
pub struct Suite {
    pub a: Arc<DenseOperator>,
    pub grad: Arc<dyn LinearOperator>,
    pub tikhonov: TikhonovInverse,
    pub train: Vec<Tensor>,
    pub test: Vec<Tensor>,
}

impl Suite {
    pub fn operator(&self) -> Arc<dyn LinearOperator> {
        self.a.clone()
    }

    pub fn tv_solver(&self, admm: &AdmmConfig) -> Result<Arc<TvSolver>> {
        Ok(Arc::new(TvSolver::new(
            self.operator(),
            Arc::clone(&self.grad),
            admm.clone(),
        )?))
    }

    /// Mean `‖A x‖` over the training signals.
    pub fn mean_measurement_norm(&self) -> f64 {
        if self.train.is_empty() {
            return 0.0;
        }
        self.train
            .iter()
            .map(|x| tensor::norm2(&self.a.apply(x.data())))
            .sum::<f64>()
            / self.train.len() as f64
    }
}

pub fn build_suite(s: &ScenarioConfig) -> Result<Suite> {
    s.validate()?;
    let n = s.signal.n;
    let a = Arc::new(sample_gaussian_operator(s.m, n, s.operator_seed)?);
    let grad: Arc<dyn LinearOperator> = Arc::new(GradientOp1D::new(n)?);
    let tikhonov = TikhonovInverse::new(a.as_ref(), grad.as_ref(), s.tikhonov_alpha)?;
    let train = sample_signals(
        &s.signal,
        s.n_train,
        rng::derive_seed(s.data_seed, &[rng::name_key("train")]),
    )?;
    let test = sample_signals(
        &s.signal,
        s.n_test,
        rng::derive_seed(s.data_seed, &[rng::name_key("test")]),
    )?;
    Ok(Suite {
        a,
        grad,
        tikhonov,
        train,
        test,
    })
}

/// Trains (or loads) a reconstruction network on the suite's training set.
pub fn build_net(
    suite: &Suite,
    kind: NetKind,
    conv: &crate::nets::ConvBlockSpec,
    iterations: usize,
    train_cfg: &TrainConfig,
    weights: Option<&Path>,
) -> Result<ReconNet> {
    if let Some(path) = weights {
        return ReconNet::from_container(&Container::read(path)?, suite.operator());
    }
    let mut net = ReconNet::new(
        kind,
        suite.operator(),
        &suite.tikhonov,
        conv.clone(),
        iterations,
        train_cfg.seed,
    )?;
    train(&mut net, &suite.train, train_cfg)?;
    Ok(net)
}

pub fn build_methods(cfg: &ExperimentConfig, suite: &Suite) -> Result<Vec<Method>> {
    let solver = suite.tv_solver(&cfg.admm)?;
    cfg.methods
        .iter()
        .map(|m| build_method(m, suite, &solver))
        .collect()
}

/// Builds one method, training networks that have no stored weights.
pub fn build_method(m: &MethodConfig, suite: &Suite, solver: &Arc<TvSolver>) -> Result<Method> {
    Ok(match m {
        MethodConfig::Tv { name } => Method::TunedTv {
            name: name.clone(),
            solver: Arc::clone(solver),
        },
        MethodConfig::TvUnconstrained { name, lambda } => Method::Fixed(Arc::new(TvRecon::new(
            name.clone(),
            Arc::clone(solver),
            TvMode::Unconstrained { lambda: *lambda },
        ))),
        MethodConfig::Tikhonov { name } => Method::Fixed(Arc::new(MatrixRecon::new(
            name.clone(),
            suite.tikhonov.shared_matrix(),
        )?)),
        MethodConfig::Net {
            name,
            net,
            conv,
            iterations,
            train,
            weights,
        } => {
            let trained = build_net(suite, *net, conv, *iterations, train, weights.as_deref())?;
            Method::Fixed(Arc::new(NetRecon::new(name.clone(), Arc::new(trained))))
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<Record>,
    pub points: Vec<CurvePoint>,
    /// `(method, noise kind, fit)` for every curve with at least 3 levels.
    pub fits: Vec<(String, String, CurveFit)>,
    pub attacks: Vec<AttackSummary>,
    pub files: Vec<PathBuf>,
}

/// Runs every (method, noise kind) curve of the config and writes
/// `records.csv`, `curves.csv`, `fits.csv`, `attacks.csv` and `curves.gp`
/// into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let suite = build_suite(&cfg.scenario)?;
    let methods = build_methods(cfg, &suite)?;
    run_with_methods(cfg, &suite, &methods)
}

/// [`run_experiment`] with already built methods, in config order.
pub fn run_with_methods(
    cfg: &ExperimentConfig,
    suite: &Suite,
    methods: &[Method],
) -> Result<ExperimentOutput> {
    let ctx = CurveContext {
        scenario: &cfg.scenario.name,
        a: suite.a.as_ref(),
        signals: &suite.test,
        seed: cfg.seed,
    };
    let mut records = Vec::new();
    let mut attacks = Vec::new();
    for method in methods {
        for &noise in &cfg.noise_kinds {
            let (_, recs, atts) =
                noise_to_error_curve(&ctx, method, &cfg.eta_grid, noise, cfg.draws, &cfg.attack)?;
            records.extend(recs);
            attacks.extend(atts);
        }
    }
    for (from, to) in &cfg.transfer {
        let target = methods
            .iter()
            .find(|m| m.name() == to)
            .ok_or_else(|| config(format!("unknown transfer target `{to}`")))?;
        let found: Vec<AttackSummary> = attacks
            .iter()
            .filter(|a| &a.method == from)
            .cloned()
            .collect();
        records.extend(transfer_records(&ctx, &found, target)?);
    }

    let points = summarize(&records);
    let mut fits = Vec::new();
    if cfg.eta_grid.len() >= 3 {
        let mut seen: Vec<(String, String)> = Vec::new();
        for p in &points {
            let key = (p.method.clone(), p.noise_kind.clone());
            if seen.contains(&key) {
                continue;
            }
            let curve: Vec<CurvePoint> = points
                .iter()
                .filter(|q| q.method == key.0 && q.noise_kind == key.1)
                .cloned()
                .collect();
            fits.push((
                key.0.clone(),
                key.1.clone(),
                fit_robustness_constant(&curve)?,
            ));
            seen.push(key);
        }
    }

    let out = &cfg.output;
    std::fs::create_dir_all(out)?;
    let files = vec![
        out.join("records.csv"),
        out.join("curves.csv"),
        out.join("fits.csv"),
        out.join("attacks.csv"),
        out.join("curves.gp"),
    ];
    write_records(&files[0], &records)?;
    write_points(&files[1], &points)?;
    write_fits(&files[2], &fits)?;
    write_attacks(&files[3], &cfg.scenario.name, &attacks)?;
    std::fs::write(&files[4], gnuplot_script(&points, &cfg.scenario.name))?;
    Ok(ExperimentOutput {
        records,
        points,
        fits,
        attacks,
        files,
    })
}

fn write_fits(path: &Path, fits: &[(String, String, CurveFit)]) -> Result<()> {
    let mut w = super::csv_writer(path)?;
    w.write_record(["method", "noise_kind", "slope", "intercept", "r2"])?;
    for (m, k, f) in fits {
        w.write_record([
            m.clone(),
            k.clone(),
            super::fmt_f64(f.slope),
            super::fmt_f64(f.intercept),
            super::fmt_f64(f.r2),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_attacks(path: &Path, scenario: &str, attacks: &[AttackSummary]) -> Result<()> {
    let mut w = super::csv_writer(path)?;
    w.write_record([
        "scenario",
        "method",
        "rel_noise",
        "signal_idx",
        "eta",
        "e_norm",
        "achieved_error",
        "baseline_error",
        "seed",
    ])?;
    for a in attacks {
        w.write_record([
            scenario.to_string(),
            a.method.clone(),
            super::fmt_f64(a.rel_noise),
            a.signal_idx.to_string(),
            super::fmt_f64(a.eta),
            super::fmt_f64(a.e_adv.norm()),
            super::fmt_f64(a.achieved_error),
            super::fmt_f64(a.baseline_error),
            a.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct JitterAblation {
    pub eta_grid: Vec<f64>,
    /// Absolute jitter bound the jittered net was trained with.
    pub jitter_bound: f64,
    pub noiseless: Vec<CurvePoint>,
    pub jittered: Vec<CurvePoint>,
    /// `noiseless mean / jittered mean` per level.
    pub ratio: Vec<f64>,
    /// Adversarial relative errors indexed `[level][signal]`.
    pub per_signal_noiseless: Vec<Vec<f64>>,
    pub per_signal_jittered: Vec<Vec<f64>>,
    pub attacks: Vec<AttackSummary>,
}

/// Trains two iterative nets that differ only in the jitter bound and
/// compares their adversarial curves. Writes `records.csv` and
/// `ablation.csv`.
pub fn ablate_jitter(cfg: &AblationConfig) -> Result<JitterAblation> {
    cfg.validate()?;
    let suite = build_suite(&cfg.scenario)?;
    let bound = cfg.rel_jitter * suite.mean_measurement_norm();
    let make = |jitter: f64, name: &str| -> Result<Method> {
        let tc = TrainConfig {
            jitter_bound: jitter,
            ..cfg.train.clone()
        };
        let net = build_net(
            &suite,
            NetKind::Iterative,
            &cfg.conv,
            cfg.iterations,
            &tc,
            None,
        )?;
        Ok(Method::Fixed(Arc::new(NetRecon::new(name, Arc::new(net)))))
    };
    let plain = make(0.0, "itnet_noiseless")?;
    let jit = make(bound, "itnet_jittered")?;
    let ctx = CurveContext {
        scenario: &cfg.scenario.name,
        a: suite.a.as_ref(),
        signals: &suite.test,
        seed: cfg.seed,
    };
    let (p0, r0, mut attacks) = noise_to_error_curve(
        &ctx,
        &plain,
        &cfg.eta_grid,
        CurveNoise::Adversarial,
        1,
        &cfg.attack,
    )?;
    let (p1, r1, a1) = noise_to_error_curve(
        &ctx,
        &jit,
        &cfg.eta_grid,
        CurveNoise::Adversarial,
        1,
        &cfg.attack,
    )?;
    attacks.extend(a1);
    let per = |recs: &[Record]| -> Vec<Vec<f64>> {
        cfg.eta_grid
            .iter()
            .map(|&e| {
                recs.iter()
                    .filter(|r| r.rel_noise == e)
                    .map(|r| r.rel_error)
                    .collect()
            })
            .collect()
    };
    let ratio: Vec<f64> = p0
        .iter()
        .zip(&p1)
        .map(|(a, b)| a.rel_error_mean / b.rel_error_mean)
        .collect();

    std::fs::create_dir_all(&cfg.output)?;
    let mut all = r0.clone();
    all.extend(r1.iter().cloned());
    write_records(&cfg.output.join("records.csv"), &all)?;
    let mut w = super::csv_writer(&cfg.output.join("ablation.csv"))?;
    w.write_record([
        "rel_noise",
        "noiseless_mean",
        "jittered_mean",
        "ratio",
        "jitter_bound",
    ])?;
    for (k, &e) in cfg.eta_grid.iter().enumerate() {
        w.write_record([
            super::fmt_f64(e),
            super::fmt_f64(p0[k].rel_error_mean),
            super::fmt_f64(p1[k].rel_error_mean),
            super::fmt_f64(ratio[k]),
            super::fmt_f64(bound),
        ])?;
    }
    w.flush()?;

    Ok(JitterAblation {
        eta_grid: cfg.eta_grid.clone(),
        jitter_bound: bound,
        per_signal_noiseless: per(&r0),
        per_signal_jittered: per(&r1),
        noiseless: p0,
        jittered: p1,
        ratio,
        attacks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyReport {
    pub clean_accuracy: f64,
    pub eta_grid: Vec<f64>,
    /// Accuracy under the margin attack at each level.
    pub accuracy: Vec<f64>,
    /// Final margin `[level][signal]`; positive means misclassified.
    pub margins: Vec<Vec<f64>>,
}

/// Jump-count parity of a signal.
pub fn parity_label(x: &Tensor) -> usize {
    jump_count(x.data()) % 2
}

/// Trains the parity classifier on ground-truth signals, composes it with
/// unconstrained TV and attacks the margin over an increasing budget, each
/// level starting from the previous level's winner. Writes
/// `classify.csv` and `margins.csv`.
pub fn classify_attack(cfg: &ClassifyConfig) -> Result<ClassifyReport> {
    cfg.validate()?;
    let suite = build_suite(&cfg.scenario)?;
    let labels: Vec<usize> = suite.train.iter().map(parity_label).collect();
    let clf = classifier_train(&suite.train, &labels, &cfg.classifier)?;
    let rec = TvRecon::new(
        "tv_unconstrained",
        suite.tv_solver(&cfg.admm)?,
        TvMode::Unconstrained { lambda: cfg.lambda },
    );
    let report = classify_with(&suite, &rec, &clf, &cfg.eta_grid, &cfg.attack, cfg.seed)?;

    std::fs::create_dir_all(&cfg.output)?;
    let mut w = super::csv_writer(&cfg.output.join("classify.csv"))?;
    w.write_record(["rel_noise", "accuracy", "clean_accuracy"])?;
    for (k, &e) in cfg.eta_grid.iter().enumerate() {
        w.write_record([
            super::fmt_f64(e),
            super::fmt_f64(report.accuracy[k]),
            super::fmt_f64(report.clean_accuracy),
        ])?;
    }
    w.flush()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.output.join("margins.csv"))?);
    writeln!(f, "rel_noise,signal_idx,label,margin")?;
    for (k, &e) in cfg.eta_grid.iter().enumerate() {
        for (s, m) in report.margins[k].iter().enumerate() {
            writeln!(
                f,
                "{:.16e},{},{},{:.16e}",
                e,
                s,
                parity_label(&suite.test[s]),
                m
            )?;
        }
    }
    f.flush()?;
    Ok(report)
}

/// The attack loop of [`classify_attack`] for a given map and classifier.
pub fn classify_with(
    suite: &Suite,
    rec: &dyn ReconMap,
    clf: &Classifier,
    eta_grid: &[f64],
    attack: &AttackConfig,
    seed: u64,
) -> Result<ClassifyReport> {
    super::check_grid(eta_grid)?;
    let pipe = Pipeline {
        rec,
        classifier: clf,
    };
    let a = suite.a.as_ref();
    let per_signal: Vec<Result<(bool, Vec<(bool, f64)>)>> = suite
        .test
        .par_iter()
        .enumerate()
        .map(|(s, x)| {
            let label = parity_label(x);
            let ybar = a.apply(x.data());
            let clean = pipe.predict(&ybar)? == label;
            let norm = tensor::norm2(&ybar);
            let mut prev: Option<Tensor> = None;
            let mut out = Vec::with_capacity(eta_grid.len());
            for (k, &rel) in eta_grid.iter().enumerate() {
                let cfg = AttackConfig {
                    eta: rel * norm,
                    seed: rng::derive_seed(seed, &[rng::name_key("margin"), s as u64, k as u64]),
                    ..attack.clone()
                };
                let inits: Vec<Tensor> = prev.iter().cloned().collect();
                let r = margin_attack(&pipe, a, x, label, &cfg, &inits)?;
                out.push((r.predicted == label, r.attack.achieved_error));
                prev = Some(r.attack.e_adv);
            }
            Ok((clean, out))
        })
        .collect();
    let mut clean = 0usize;
    let mut correct = vec![0usize; eta_grid.len()];
    let mut margins = vec![Vec::with_capacity(suite.test.len()); eta_grid.len()];
    for item in per_signal {
        let (c, levels) = item?;
        clean += usize::from(c);
        for (k, (ok, m)) in levels.into_iter().enumerate() {
            correct[k] += usize::from(ok);
            margins[k].push(m);
        }
    }
    let n = suite.test.len() as f64;
    Ok(ClassifyReport {
        clean_accuracy: clean as f64 / n,
        eta_grid: eta_grid.to_vec(),
        accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
        margins,
    })
}
