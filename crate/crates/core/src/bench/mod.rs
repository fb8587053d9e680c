//! Metrics, noise-to-error curves, robustness fits and experiment runs.

mod config;
mod experiment;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    find_adversarial, sample_statistical_noise, transfer_eval, AttackConfig, NoiseKind,
};
use crate::error::{config, contract, Error, Result};
use crate::operators::LinearOperator;
use crate::recon::{ReconMap, TvRecon};
use crate::rng;
use crate::tensor::{self, Tensor};
use crate::tv::{TvMode, TvSolver};

pub use config::{
    parse_json, AblationConfig, ClassifyConfig, ExperimentConfig, MethodConfig, ScenarioConfig,
    CONFIG_VERSION,
};
pub use experiment::{
    ablate_jitter, build_method, build_methods, build_net, build_suite, classify_attack,
    classify_with, parity_label, run_experiment, run_with_methods, ClassifyReport,
    ExperimentOutput, JitterAblation, Suite,
};

pub const PSNR_CAP: f64 = 99.0;

/// `‖xhat − xbar‖ / ‖xbar‖`.
pub fn rel_error(xhat: &[f64], xbar: &[f64]) -> Result<f64> {
    if xhat.len() != xbar.len() {
        return Err(contract(format!(
            "rel_error: lengths {} and {}",
            xhat.len(),
            xbar.len()
        )));
    }
    let d = tensor::norm2(xbar);
    if d == 0.0 {
        return Err(contract("rel_error: reference signal is zero"));
    }
    Ok(tensor::norm2(&tensor::sub(xhat, xbar)) / d)
}

/// `10·log10(window² / mse)`, capped at [`PSNR_CAP`].
pub fn psnr(xhat: &[f64], xbar: &[f64], window: f64) -> Result<f64> {
    if xhat.len() != xbar.len() || xbar.is_empty() {
        return Err(contract("psnr: lengths differ or are empty"));
    }
    if !(window > 0.0) {
        return Err(contract(format!("psnr: window must be > 0, got {window}")));
    }
    let d = tensor::sub(xhat, xbar);
    let mse = tensor::dot(&d, &d) / d.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (window * window / mse).log10()).min(PSNR_CAP))
}

/// Peak-to-peak range of a signal, the PSNR window used by the harness.
pub fn signal_window(x: &[f64]) -> f64 {
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

/// Which perturbation a curve is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveNoise {
    Adversarial,
    Gaussian,
    Uniform,
    Bernoulli { p: f64 },
}

impl CurveNoise {
    pub fn label(&self) -> &'static str {
        match self {
            CurveNoise::Adversarial => "adversarial",
            CurveNoise::Gaussian => "gaussian",
            CurveNoise::Uniform => "uniform",
            CurveNoise::Bernoulli { .. } => "bernoulli",
        }
    }

    pub fn statistical(&self) -> Option<NoiseKind> {
        match *self {
            CurveNoise::Adversarial => None,
            CurveNoise::Gaussian => Some(NoiseKind::Gaussian),
            CurveNoise::Uniform => Some(NoiseKind::Uniform),
            CurveNoise::Bernoulli { p } => Some(NoiseKind::Bernoulli { p }),
        }
    }
}

/// One reconstruction in a curve; a CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub scenario: String,
    pub method: String,
    pub noise_kind: String,
    pub rel_noise: f64,
    pub signal_idx: usize,
    pub draw_idx: usize,
    pub rel_error: f64,
    pub psnr: f64,
    pub seed: u64,
}

pub const RECORD_HEADER: [&str; 9] = [
    "scenario",
    "method",
    "noise_kind",
    "rel_noise",
    "signal_idx",
    "draw_idx",
    "rel_error",
    "psnr",
    "seed",
];

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.write_record([
            r.scenario.clone(),
            r.method.clone(),
            r.noise_kind.clone(),
            fmt_f64(r.rel_noise),
            r.signal_idx.to_string(),
            r.draw_idx.to_string(),
            fmt_f64(r.rel_error),
            fmt_f64(r.psnr),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    if header.iter().ne(RECORD_HEADER) {
        return Err(Error::Validation {
            path: format!("{}:1", path.display()),
            reason: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let bad = |col: &str| Error::Validation {
            path: format!("{}:{}:{col}", path.display(), i + 2),
            reason: "not a number".into(),
        };
        let f = |k: usize| row[k].parse::<f64>().map_err(|_| bad(RECORD_HEADER[k]));
        let u = |k: usize| row[k].parse::<u64>().map_err(|_| bad(RECORD_HEADER[k]));
        out.push(Record {
            scenario: row[0].to_string(),
            method: row[1].to_string(),
            noise_kind: row[2].to_string(),
            rel_noise: f(3)?,
            signal_idx: u(4)? as usize,
            draw_idx: u(5)? as usize,
            rel_error: f(6)?,
            psnr: f(7)?,
            seed: u(8)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub noise_kind: String,
    pub rel_noise: f64,
    pub rel_error_mean: f64,
    pub rel_error_std: f64,
    pub n_signals: usize,
    pub n_draws: usize,
}

/// Groups records by (method, noise kind, noise level), keeping first-seen
/// order, and averages over signals and draws.
pub fn summarize(records: &[Record]) -> Vec<CurvePoint> {
    let mut keys: Vec<(String, String, u64)> = Vec::new();
    let mut groups: Vec<Vec<&Record>> = Vec::new();
    for r in records {
        let key = (
            r.method.clone(),
            r.noise_kind.clone(),
            r.rel_noise.to_bits(),
        );
        match keys.iter().position(|k| *k == key) {
            Some(i) => groups[i].push(r),
            None => {
                keys.push(key);
                groups.push(vec![r]);
            }
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let n = g.len() as f64;
            let mean = g.iter().map(|r| r.rel_error).sum::<f64>() / n;
            let var = g.iter().map(|r| (r.rel_error - mean).powi(2)).sum::<f64>() / n;
            let mut signals: Vec<usize> = g.iter().map(|r| r.signal_idx).collect();
            signals.sort_unstable();
            signals.dedup();
            let draws = g.iter().map(|r| r.draw_idx).max().unwrap_or(0) + 1;
            CurvePoint {
                method: g[0].method.clone(),
                noise_kind: g[0].noise_kind.clone(),
                rel_noise: g[0].rel_noise,
                rel_error_mean: mean,
                rel_error_std: var.sqrt(),
                n_signals: signals.len(),
                n_draws: draws,
            }
        })
        .collect()
}

pub fn write_points(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "method",
        "noise_kind",
        "rel_noise",
        "rel_error_mean",
        "rel_error_std",
        "n_signals",
        "n_draws",
    ])?;
    for p in points {
        w.write_record([
            p.method.clone(),
            p.noise_kind.clone(),
            fmt_f64(p.rel_noise),
            fmt_f64(p.rel_error_mean),
            fmt_f64(p.rel_error_std),
            p.n_signals.to_string(),
            p.n_draws.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares line `error ≈ slope·rel_noise + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_robustness_constant(points: &[CurvePoint]) -> Result<CurveFit> {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.rel_noise, p.rel_error_mean))
        .collect();
    fit_line(&xy)
}

pub fn fit_line(xy: &[(f64, f64)]) -> Result<CurveFit> {
    if xy.len() < 3 {
        return Err(config(format!(
            "a robustness fit needs at least 3 points, got {}",
            xy.len()
        )));
    }
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(config(
            "a robustness fit needs at least two distinct noise levels",
        ));
    }
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xy
        .iter()
        .map(|p| (p.1 - slope * p.0 - intercept).powi(2))
        .sum();
    let ss_tot: f64 = xy.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(CurveFit {
        slope,
        intercept,
        r2,
    })
}

/// gnuplot script plotting every (method, noise kind) series.
pub fn gnuplot_script(points: &[CurvePoint], title: &str) -> String {
    let mut series: Vec<(String, Vec<&CurvePoint>)> = Vec::new();
    for p in points {
        let name = format!("{} {}", p.method, p.noise_kind);
        match series.iter_mut().find(|s| s.0 == name) {
            Some(s) => s.1.push(p),
            None => series.push((name, vec![p])),
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, "set title '{}'", title.replace('\'', "''"));
    let _ = writeln!(s, "set xlabel 'relative noise level'");
    let _ = writeln!(s, "set ylabel 'relative reconstruction error'");
    let _ = writeln!(s, "set key left top");
    let _ = writeln!(s, "set grid");
    for (i, (_, pts)) in series.iter().enumerate() {
        let _ = writeln!(s, "$s{i} << EOD");
        for p in pts {
            let _ = writeln!(
                s,
                "{:.16e} {:.16e} {:.16e}",
                p.rel_noise, p.rel_error_mean, p.rel_error_std
            );
        }
        let _ = writeln!(s, "EOD");
    }
    let plots: Vec<String> = series
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            format!(
                "$s{i} using 1:2 with linespoints title '{}'",
                name.replace('\'', "''")
            )
        })
        .collect();
    let _ = writeln!(s, "plot {}", plots.join(", \\\n     "));
    s
}

/// A reconstruction method as used in curves: either a fixed map or
/// constrained TV re-tuned to each absolute noise level.
#[derive(Clone)]
pub enum Method {
    Fixed(Arc<dyn ReconMap>),
    TunedTv { name: String, solver: Arc<TvSolver> },
}

impl std::fmt::Debug for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("Method").field(&self.name()).finish()
    }
}

impl Method {
    pub fn name(&self) -> &str {
        match self {
            Method::Fixed(m) => m.name(),
            Method::TunedTv { name, .. } => name,
        }
    }

    /// The map used at absolute noise level `eta`.
    pub fn map_at(&self, eta: f64) -> Arc<dyn ReconMap> {
        match self {
            Method::Fixed(m) => Arc::clone(m),
            Method::TunedTv { name, solver } => Arc::new(TvRecon::new(
                name.clone(),
                Arc::clone(solver),
                TvMode::Constrained { eta },
            )),
        }
    }

    /// Reconstructs each of `ys`; TV solves are warm-started from the
    /// solution at `ybar`.
    pub fn reconstruct_near(
        &self,
        eta: f64,
        ybar: &[f64],
        ys: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        match self {
            Method::Fixed(m) => ys.iter().map(|y| m.reconstruct(y)).collect(),
            Method::TunedTv { solver, .. } => {
                let mode = TvMode::Constrained { eta };
                let warm = solver
                    .solve(&Tensor::from_vec(ybar.to_vec()), mode, None)?
                    .state;
                ys.iter()
                    .map(|y| {
                        Ok(solver
                            .solve(&Tensor::from_vec(y.clone()), mode, Some(&warm))?
                            .x
                            .into_data())
                    })
                    .collect()
            }
        }
    }
}

/// Outcome of one attack inside a curve, kept for feasibility/dominance
/// checks and transfer experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSummary {
    pub method: String,
    pub signal_idx: usize,
    pub rel_noise: f64,
    pub eta: f64,
    pub e_adv: Tensor,
    pub achieved_error: f64,
    pub baseline_error: f64,
    pub seed: u64,
}

/// Shared inputs of a curve run.
pub struct CurveContext<'a> {
    pub scenario: &'a str,
    pub a: &'a dyn LinearOperator,
    pub signals: &'a [Tensor],
    pub seed: u64,
}

impl CurveContext<'_> {
    fn item_seed(
        &self,
        method: &str,
        kind: &str,
        signal: usize,
        eta_idx: usize,
        draw: usize,
    ) -> u64 {
        rng::derive_seed(
            self.seed,
            &[
                rng::name_key(method),
                rng::name_key(kind),
                signal as u64,
                eta_idx as u64,
                draw as u64,
            ],
        )
    }

    fn abs_eta(&self, signal: usize, rel: f64) -> f64 {
        rel * tensor::norm2(&self.a.apply(self.signals[signal].data()))
    }

    fn record(
        &self,
        method: &str,
        kind: &str,
        rel: f64,
        signal: usize,
        draw: usize,
        xhat: &[f64],
        seed: u64,
    ) -> Result<Record> {
        let x = self.signals[signal].data();
        Ok(Record {
            scenario: self.scenario.to_string(),
            method: method.to_string(),
            noise_kind: kind.to_string(),
            rel_noise: rel,
            signal_idx: signal,
            draw_idx: draw,
            rel_error: rel_error(xhat, x)?,
            psnr: psnr(xhat, x, signal_window(x))?,
            seed,
        })
    }

    /// The statistical draw used both by statistical curves and as an
    /// attack init.
    fn statistical_draw(
        &self,
        method: &str,
        kind: NoiseKind,
        label: &str,
        signal: usize,
        eta_idx: usize,
        draw: usize,
        eta: f64,
    ) -> Result<(Tensor, u64)> {
        let seed = self.item_seed(method, label, signal, eta_idx, draw);
        let mut r = rng::stream(seed, &[]);
        Ok((
            sample_statistical_noise(kind, self.a.rows(), eta, &mut r)?,
            seed,
        ))
    }
}

fn check_grid(eta_grid: &[f64]) -> Result<()> {
    if eta_grid.is_empty() {
        return Err(config("noise grid is empty"));
    }
    if eta_grid.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
        return Err(config("noise levels must be finite and >= 0"));
    }
    if eta_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(config("noise grid must be strictly increasing"));
    }
    Ok(())
}

/// Mean/std of the relative error over the context's signals at each
/// relative noise level `η/‖A x̄‖`. Statistical kinds average over `draws`
/// draws per signal; adversarial runs one attack per (signal, η), nested
/// over the increasing grid with the previous winner and a Gaussian draw as
/// extra inits.
pub fn noise_to_error_curve(
    ctx: &CurveContext<'_>,
    method: &Method,
    eta_grid: &[f64],
    noise: CurveNoise,
    draws: usize,
    attack: &AttackConfig,
) -> Result<(Vec<CurvePoint>, Vec<Record>, Vec<AttackSummary>)> {
    check_grid(eta_grid)?;
    if ctx.signals.is_empty() {
        return Err(config("curve needs at least one signal"));
    }
    let name = method.name();
    let label = noise.label();
    let (records, attacks) = match noise.statistical() {
        Some(kind) => {
            if draws == 0 {
                return Err(config("statistical curves need draws >= 1"));
            }
            let items: Vec<(usize, usize)> = (0..ctx.signals.len())
                .flat_map(|s| (0..eta_grid.len()).map(move |k| (s, k)))
                .collect();
            let parts: Vec<Result<Vec<Record>>> = items
                .par_iter()
                .map(|&(s, k)| {
                    let rel = eta_grid[k];
                    let eta = ctx.abs_eta(s, rel);
                    let ybar = ctx.a.apply(ctx.signals[s].data());
                    let mut ys = Vec::with_capacity(draws);
                    let mut seeds = Vec::with_capacity(draws);
                    for d in 0..draws {
                        let (e, seed) = ctx.statistical_draw(name, kind, label, s, k, d, eta)?;
                        ys.push(tensor::add(&ybar, e.data()));
                        seeds.push(seed);
                    }
                    let xs = method.reconstruct_near(eta, &ybar, &ys)?;
                    xs.iter()
                        .enumerate()
                        .map(|(d, xhat)| ctx.record(name, label, rel, s, d, xhat, seeds[d]))
                        .collect()
                })
                .collect();
            let mut records = Vec::new();
            for p in parts {
                records.extend(p?);
            }
            records.sort_by_key(|r| (eta_idx(eta_grid, r.rel_noise), r.signal_idx, r.draw_idx));
            (records, Vec::new())
        }
        None => {
            let parts: Vec<Result<Vec<(Record, AttackSummary)>>> = (0..ctx.signals.len())
                .into_par_iter()
                .map(|s| adversarial_item(ctx, method, eta_grid, attack, s))
                .collect();
            let mut pairs = Vec::new();
            for p in parts {
                pairs.extend(p?);
            }
            pairs.sort_by_key(|(r, _)| (eta_idx(eta_grid, r.rel_noise), r.signal_idx));
            pairs.into_iter().unzip()
        }
    };
    Ok((summarize(&records), records, attacks))
}

fn eta_idx(grid: &[f64], rel: f64) -> usize {
    grid.iter().position(|&g| g == rel).unwrap_or(usize::MAX)
}

fn adversarial_item(
    ctx: &CurveContext<'_>,
    method: &Method,
    eta_grid: &[f64],
    attack: &AttackConfig,
    s: usize,
) -> Result<Vec<(Record, AttackSummary)>> {
    let name = method.name();
    let x = &ctx.signals[s];
    let mut prev: Option<Tensor> = None;
    let mut out = Vec::with_capacity(eta_grid.len());
    for (k, &rel) in eta_grid.iter().enumerate() {
        let eta = ctx.abs_eta(s, rel);
        let seed = ctx.item_seed(name, "adversarial", s, k, 0);
        let map = method.map_at(eta);
        let mut inits: Vec<Tensor> = prev.iter().cloned().collect();
        if eta > 0.0 {
            inits.push(
                ctx.statistical_draw(name, NoiseKind::Gaussian, "gaussian", s, k, 0, eta)?
                    .0,
            );
        }
        let cfg = AttackConfig {
            eta,
            seed,
            ..attack.clone()
        };
        let res = find_adversarial(map.as_ref(), ctx.a, x, &cfg, &inits)?;
        let baseline = transfer_eval(&Tensor::zeros(&[ctx.a.rows()]), map.as_ref(), ctx.a, x)?;
        let xhat = map.reconstruct(&tensor::add(&ctx.a.apply(x.data()), res.e_adv.data()))?;
        let rec = ctx.record(name, "adversarial", rel, s, 0, &xhat, seed)?;
        out.push((
            rec,
            AttackSummary {
                method: name.to_string(),
                signal_idx: s,
                rel_noise: rel,
                eta,
                e_adv: res.e_adv.clone(),
                achieved_error: res.achieved_error,
                baseline_error: baseline,
                seed,
            },
        ));
        prev = Some(res.e_adv);
    }
    Ok(out)
}

/// Evaluates attacks found against one method on another method tuned to
/// the same noise level. Rows use method `"{from}->{to}"` and noise kind
/// `"transfer"`.
pub fn transfer_records(
    ctx: &CurveContext<'_>,
    attacks: &[AttackSummary],
    to: &Method,
) -> Result<Vec<Record>> {
    attacks
        .par_iter()
        .map(|at| {
            let map = to.map_at(at.eta);
            let x = &ctx.signals[at.signal_idx];
            let xhat = map.reconstruct(&tensor::add(&ctx.a.apply(x.data()), at.e_adv.data()))?;
            ctx.record(
                &format!("{}->{}", at.method, to.name()),
                "transfer",
                at.rel_noise,
                at.signal_idx,
                0,
                &xhat,
                at.seed,
            )
        })
        .collect()
}
