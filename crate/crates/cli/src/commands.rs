use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use invrob::attacks::{find_adversarial, AttackConfig};
use invrob::bench::{
    ablate_jitter, build_method, build_suite, classify_attack, parse_json, psnr, rel_error,
    run_experiment, signal_window, write_records, AblationConfig, ClassifyConfig, ExperimentConfig,
    MethodConfig, Record, ScenarioConfig, CONFIG_VERSION,
};
use invrob::container::Container;
use invrob::nets::{ConvBlockSpec, NetKind, TrainConfig, DEFAULT_ITERATIONS};
use invrob::operators::LinearOperator;
use invrob::signals::{dataset_from_signals, DatasetNoise};
use invrob::tensor::{self, Tensor};
use invrob::tv::AdmmConfig;
use invrob::{rng, Error};
use serde::{Deserialize, Serialize};

pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, seed: &mut u64, out: &mut PathBuf) {
        if let Some(s) = self.seed {
            *seed = s;
        }
        if let Some(o) = &self.out {
            *out = o.clone();
        }
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != CONFIG_VERSION {
        return Err(Error::Validation {
            path: "version".into(),
            reason: format!("unsupported version {v}, expected {CONFIG_VERSION}"),
        }
        .into());
    }
    Ok(())
}

fn write_meta(dir: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(value)? + "\n",
    )?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    version: u32,
    scenario: ScenarioConfig,
    #[serde(default = "no_noise")]
    noise: DatasetNoise,
    #[serde(default)]
    seed: u64,
    output: PathBuf,
}

fn no_noise() -> DatasetNoise {
    DatasetNoise::None
}

pub fn gen_data(text: &str, o: &Overrides) -> Result<()> {
    let mut cfg: GenDataConfig = parse_json(text)?;
    o.apply(&mut cfg.seed, &mut cfg.output);
    check_version(cfg.version)?;
    let suite = build_suite(&cfg.scenario)?;
    let meta = serde_json::to_value(&cfg)?;
    let dir = &cfg.output;
    suite
        .a
        .to_container(meta.clone())
        .write(&dir.join("operator.bin"))?;
    for (name, signals) in [("train", &suite.train), ("test", &suite.test)] {
        if signals.is_empty() {
            continue;
        }
        let seed = rng::derive_seed(cfg.seed, &[rng::name_key(name)]);
        let ds = dataset_from_signals(suite.a.as_ref(), signals.clone(), cfg.noise, seed)?;
        ds.to_container(meta.clone())?
            .write(&dir.join(format!("{name}.bin")))?;
        println!("{name}: {} samples", ds.len());
    }
    write_meta(dir, &cfg)?;
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainNetConfig {
    version: u32,
    scenario: ScenarioConfig,
    net: NetKind,
    #[serde(default)]
    conv: ConvBlockSpec,
    #[serde(default = "default_iterations")]
    iterations: usize,
    #[serde(default)]
    train: TrainConfig,
    output: PathBuf,
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

pub fn train(text: &str, o: &Overrides) -> Result<()> {
    let mut cfg: TrainNetConfig = parse_json(text)?;
    o.apply(&mut cfg.train.seed, &mut cfg.output);
    check_version(cfg.version)?;
    if cfg.scenario.n_train == 0 {
        bail!(Error::Validation {
            path: "scenario.n_train".into(),
            reason: "must be >= 1".into()
        });
    }
    let suite = build_suite(&cfg.scenario)?;
    let mut net = invrob::nets::ReconNet::new(
        cfg.net,
        suite.operator(),
        &suite.tikhonov,
        cfg.conv.clone(),
        cfg.iterations,
        cfg.train.seed,
    )?;
    let report = invrob::nets::train(&mut net, &suite.train, &cfg.train)?;
    let dir = &cfg.output;
    net.to_container()?.write(&dir.join("net.bin"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("loss.csv"))?);
    writeln!(f, "epoch,loss")?;
    for (i, l) in report.loss_history.iter().enumerate() {
        writeln!(f, "{i},{l:.16e}")?;
    }
    f.flush()?;
    write_meta(dir, &cfg)?;

    let mut err = 0.0;
    for x in &suite.test {
        let xr = net.forward(&Tensor::from_vec(suite.a.apply(x.data())))?;
        err += rel_error(xr.data(), x.data())?;
    }
    println!(
        "{}: final loss {:.6e}, mean clean test error {:.6}",
        cfg.net.label(),
        report.loss_history.last().copied().unwrap_or(f64::NAN),
        err / suite.test.len() as f64
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackRunConfig {
    version: u32,
    scenario: ScenarioConfig,
    #[serde(default)]
    admm: AdmmConfig,
    method: MethodConfig,
    rel_noise: f64,
    #[serde(default)]
    signal_idx: usize,
    #[serde(default)]
    attack: AttackConfig,
    #[serde(default)]
    seed: u64,
    output: PathBuf,
}

pub fn attack(text: &str, o: &Overrides) -> Result<()> {
    let mut cfg: AttackRunConfig = parse_json(text)?;
    o.apply(&mut cfg.seed, &mut cfg.output);
    check_version(cfg.version)?;
    if !(cfg.rel_noise >= 0.0) {
        bail!(Error::Validation {
            path: "rel_noise".into(),
            reason: "must be >= 0".into()
        });
    }
    let suite = build_suite(&cfg.scenario)?;
    let x = suite
        .test
        .get(cfg.signal_idx)
        .with_context(|| format!("signal_idx {} out of range", cfg.signal_idx))?;
    let method = build_method(&cfg.method, &suite, &suite.tv_solver(&cfg.admm)?)?;
    let eta = cfg.rel_noise * tensor::norm2(&suite.a.apply(x.data()));
    let map = method.map_at(eta);
    let acfg = AttackConfig {
        eta,
        seed: cfg.seed,
        ..cfg.attack.clone()
    };
    let res = find_adversarial(map.as_ref(), suite.a.as_ref(), x, &acfg, &[])?;
    let dir = &cfg.output;
    res.write_csv(&dir.join("attack.csv"))?;
    let meta = serde_json::json!({
        "method": method.name(),
        "signal_idx": cfg.signal_idx,
        "rel_noise": cfg.rel_noise,
        "eta": eta,
        "achieved_error": res.achieved_error,
        "scenario": cfg.scenario,
    });
    res.to_container(meta).write(&dir.join("e_adv.bin"))?;
    write_meta(dir, &cfg)?;
    println!(
        "{} signal {} rel_noise {}: achieved error {:.6} (|e| = {:.6e}, eta = {:.6e})",
        method.name(),
        cfg.signal_idx,
        cfg.rel_noise,
        res.achieved_error,
        res.e_adv.norm(),
        eta
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferConfig {
    version: u32,
    #[serde(default)]
    admm: AdmmConfig,
    method: MethodConfig,
    /// `e_adv.bin` written by the attack command.
    perturbation: PathBuf,
    #[serde(default)]
    seed: u64,
    output: PathBuf,
}

pub fn transfer(text: &str, o: &Overrides) -> Result<()> {
    let mut cfg: TransferConfig = parse_json(text)?;
    o.apply(&mut cfg.seed, &mut cfg.output);
    check_version(cfg.version)?;
    let c = Container::read(&cfg.perturbation)
        .with_context(|| format!("reading {}", cfg.perturbation.display()))?;
    let e = c
        .get("e_adv")
        .context("perturbation container has no `e_adv` entry")?;
    let field = |k: &str| {
        c.meta
            .get(k)
            .cloned()
            .with_context(|| format!("perturbation metadata lacks `{k}`"))
    };
    let scenario: ScenarioConfig = serde_json::from_value(field("scenario")?)?;
    let from: String = serde_json::from_value(field("method")?)?;
    let signal_idx: usize = serde_json::from_value(field("signal_idx")?)?;
    let rel_noise: f64 = serde_json::from_value(field("rel_noise")?)?;
    let eta: f64 = serde_json::from_value(field("eta")?)?;

    let suite = build_suite(&scenario)?;
    let x = suite
        .test
        .get(signal_idx)
        .context("perturbation refers to a missing test signal")?;
    let method = build_method(&cfg.method, &suite, &suite.tv_solver(&cfg.admm)?)?;
    let map = method.map_at(eta);
    let err = invrob::attacks::transfer_eval(e, map.as_ref(), suite.a.as_ref(), x)?;
    let xhat = map.reconstruct(&tensor::add(&suite.a.apply(x.data()), e.data()))?;
    let record = Record {
        scenario: scenario.name.clone(),
        method: format!("{from}->{}", method.name()),
        noise_kind: "transfer".into(),
        rel_noise,
        signal_idx,
        draw_idx: 0,
        rel_error: err,
        psnr: psnr(&xhat, x.data(), signal_window(x.data()))?,
        seed: cfg.seed,
    };
    write_records(&cfg.output.join("transfer.csv"), &[record])?;
    write_meta(&cfg.output, &cfg)?;
    println!("{from} -> {}: relative error {err:.6}", method.name());
    Ok(())
}

pub fn curve(text: &str, o: &Overrides) -> Result<()> {
    let mut cfg = ExperimentConfig::from_json(text)?;
    o.apply(&mut cfg.seed, &mut cfg.output);
    let out = run_experiment(&cfg)?;
    write_meta(&cfg.output, &cfg)?;
    for p in &out.points {
        println!(
            "{:<16} {:<12} {:>8.4} {:>10.6} ± {:.6}",
            p.method, p.noise_kind, p.rel_noise, p.rel_error_mean, p.rel_error_std
        );
    }
    for (m, k, f) in &out.fits {
        println!(
            "fit {m} {k}: C = {:.6}, intercept {:.6}, r2 {:.4}",
            f.slope, f.intercept, f.r2
        );
    }
    Ok(())
}

pub fn ablate(text: &str, o: &Overrides) -> Result<()> {
    let mut cfg = AblationConfig::from_json(text)?;
    o.apply(&mut cfg.seed, &mut cfg.output);
    let r = ablate_jitter(&cfg)?;
    write_meta(&cfg.output, &cfg)?;
    for (k, e) in r.eta_grid.iter().enumerate() {
        println!(
            "rel_noise {e:.4}: noiseless {:.6}, jittered {:.6}, ratio {:.3}",
            r.noiseless[k].rel_error_mean, r.jittered[k].rel_error_mean, r.ratio[k]
        );
    }
    Ok(())
}

pub fn classify(text: &str, o: &Overrides) -> Result<()> {
    let mut cfg = ClassifyConfig::from_json(text)?;
    o.apply(&mut cfg.seed, &mut cfg.output);
    let r = classify_attack(&cfg)?;
    write_meta(&cfg.output, &cfg)?;
    println!("clean accuracy {:.4}", r.clean_accuracy);
    for (e, a) in r.eta_grid.iter().zip(&r.accuracy) {
        println!("rel_noise {e:.4}: accuracy {a:.4}");
    }
    Ok(())
}
