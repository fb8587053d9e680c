//! Worst-case and statistical measurement perturbations.

pub mod noise;

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::container::Container;
use crate::error::{config, contract, Error, Result};
use crate::nets::Classifier;
use crate::operators::LinearOperator;
use crate::prox::project_ball_slice;
use crate::recon::{ReconMap, ReconSession};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

pub use noise::{sample_statistical_noise, NoiseKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub steps: usize,
    /// Adam step size; `None` uses `eta / 10`.
    pub lr: Option<f64>,
    pub restarts: usize,
    pub eta: f64,
    pub include_zero_init: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: None,
            restarts: 5,
            eta: 0.0,
            include_zero_init: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 {
            return Err(config("attack steps and restarts must be >= 1"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(config(format!(
                "attack budget must be >= 0, got {}",
                self.eta
            )));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0) {
                return Err(config(format!("attack lr must be > 0, got {lr}")));
            }
        }
        Ok(())
    }

    fn step_size(&self) -> f64 {
        self.lr.unwrap_or(self.eta / 10.0)
    }
}

/// Where a restart started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Zero,
    Supplied,
    Random,
}

impl InitKind {
    pub fn label(self) -> &'static str {
        match self {
            InitKind::Zero => "zero",
            InitKind::Supplied => "supplied",
            InitKind::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartRecord {
    pub init: InitKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub e_adv: Tensor,
    /// Best objective over restarts: relative reconstruction error for
    /// [`find_adversarial`], classification margin for [`margin_attack`].
    pub achieved_error: f64,
    pub per_restart: Vec<RestartRecord>,
    /// Objective after each step of the winning restart, as seen by the
    /// differentiable surrogate.
    pub trace: Vec<f64>,
    pub eta: f64,
}

impl AttackResult {
    pub fn per_restart_errors(&self) -> Vec<f64> {
        self.per_restart.iter().map(|r| r.value).collect()
    }

    /// One row per restart.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "restart,init,value,eta,winner")?;
        for (i, r) in self.per_restart.iter().enumerate() {
            writeln!(
                f,
                "{},{},{:.16e},{:.16e},{}",
                i,
                r.init.label(),
                r.value,
                self.eta,
                u8::from(r.value == self.achieved_error)
            )?;
        }
        Ok(())
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::with_meta(meta);
        c.push("e_adv", self.e_adv.clone());
        c
    }
}

/// A scalar to maximize over the perturbation.
trait Objective: Sync {
    fn session(&self, y0: &[f64]) -> Result<Box<dyn ObjectiveSession + '_>>;

    /// Exact objective at measurements `y` (no surrogate).
    fn evaluate(&self, y: &[f64]) -> Result<f64>;
}

trait ObjectiveSession {
    /// Records the surrogate objective; returns (node to differentiate,
    /// comparable value).
    fn record(&mut self, tape: &mut Tape, y: Var) -> Result<(Var, f64)>;
}

struct ReconError<'a> {
    rec: &'a dyn ReconMap,
    xbar: &'a [f64],
    xnorm: f64,
}

struct ReconErrorSession<'a> {
    inner: Box<dyn ReconSession + 'a>,
    xbar: &'a [f64],
    xnorm: f64,
}

impl Objective for ReconError<'_> {
    fn session(&self, y0: &[f64]) -> Result<Box<dyn ObjectiveSession + '_>> {
        Ok(Box::new(ReconErrorSession {
            inner: self.rec.session(y0)?,
            xbar: self.xbar,
            xnorm: self.xnorm,
        }))
    }

    fn evaluate(&self, y: &[f64]) -> Result<f64> {
        let x = self.rec.reconstruct(y)?;
        Ok(tensor::norm2(&tensor::sub(&x, self.xbar)) / self.xnorm)
    }
}

impl ObjectiveSession for ReconErrorSession<'_> {
    fn record(&mut self, tape: &mut Tape, y: Var) -> Result<(Var, f64)> {
        let out = self.inner.record(tape, y)?;
        let target = tape.leaf(self.xbar.to_vec())?;
        let d = tape.sub(out, target)?;
        let l = tape.squared_norm(d)?;
        Ok((l, tape.scalar(l).sqrt() / self.xnorm))
    }
}

/// Classifier applied to a reconstruction.
pub struct Pipeline<'a> {
    pub rec: &'a dyn ReconMap,
    pub classifier: &'a Classifier,
}

impl Pipeline<'_> {
    pub fn logits(&self, y: &[f64]) -> Result<Vec<f64>> {
        let x = self.rec.reconstruct(y)?;
        self.classifier.logits(&Tensor::from_vec(x))
    }

    pub fn predict(&self, y: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(y)?))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `max_{k≠c} logit_k − logit_c`.
pub fn margin(logits: &[f64], class: usize) -> f64 {
    logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != class)
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max)
        - logits[class]
}

struct Margin<'a> {
    pipeline: &'a Pipeline<'a>,
    class: usize,
}

struct MarginSession<'a> {
    inner: Box<dyn ReconSession + 'a>,
    classifier: &'a Classifier,
    class: usize,
}

impl Objective for Margin<'_> {
    fn session(&self, y0: &[f64]) -> Result<Box<dyn ObjectiveSession + '_>> {
        Ok(Box::new(MarginSession {
            inner: self.pipeline.rec.session(y0)?,
            classifier: self.pipeline.classifier,
            class: self.class,
        }))
    }

    fn evaluate(&self, y: &[f64]) -> Result<f64> {
        Ok(margin(&self.pipeline.logits(y)?, self.class))
    }
}

impl ObjectiveSession for MarginSession<'_> {
    fn record(&mut self, tape: &mut Tape, y: Var) -> Result<(Var, f64)> {
        let x = self.inner.record(tape, y)?;
        let p = self.classifier.params().leaves(tape)?;
        let logits = self.classifier.record_logits(tape, x, &p)?;
        let lv = tape.value(logits).to_vec();
        let rival = (0..lv.len())
            .filter(|&k| k != self.class)
            .fold(None, |best: Option<usize>, k| match best {
                Some(b) if lv[b] >= lv[k] => Some(b),
                _ => Some(k),
            })
            .ok_or_else(|| contract("margin needs at least two classes"))?;
        let hi = tape.pick(logits, rival)?;
        let lo = tape.pick(logits, self.class)?;
        let mg = tape.sub(hi, lo)?;
        Ok((mg, tape.scalar(mg)))
    }
}

/// Uniform draw from the ball of radius `eta`: Gaussian direction, radius
/// `eta·U^{1/m}`.
pub fn uniform_in_ball(m: usize, eta: f64, rng: &mut impl Rng) -> Vec<f64> {
    let g: Vec<f64> = (0..m)
        .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    let n = tensor::norm2(&g);
    if n == 0.0 || eta == 0.0 {
        return vec![0.0; m];
    }
    let r = eta * rng.random::<f64>().powf(1.0 / m as f64);
    let v: Vec<f64> = g.iter().map(|v| v * r / n).collect();
    project_ball_slice(&v, &vec![0.0; m], eta)
}

struct RestartOutcome {
    e: Vec<f64>,
    value: f64,
    trace: Vec<f64>,
}

fn run_restart(
    obj: &dyn Objective,
    ybar: &[f64],
    init: Vec<f64>,
    cfg: &AttackConfig,
) -> std::result::Result<RestartOutcome, (usize, Error)> {
    let m = ybar.len();
    let zero = vec![0.0; m];
    let mut e = project_ball_slice(&init, &zero, cfg.eta);
    let init_value = obj
        .evaluate(&tensor::add(ybar, &e))
        .map_err(|err| (0, err))?;
    if cfg.eta == 0.0 {
        return Ok(RestartOutcome {
            e,
            value: init_value,
            trace: vec![init_value],
        });
    }

    let mut session = obj.session(ybar).map_err(|err| (0, err))?;
    let mut adam = AdamState::new(m, cfg.step_size());
    let mut best = (f64::NEG_INFINITY, e.clone());
    let mut trace = Vec::with_capacity(cfg.steps);

    let surrogate = |session: &mut Box<dyn ObjectiveSession + '_>,
                     e: &[f64],
                     want_grad: bool|
     -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let ev = tape.leaf(e.to_vec())?;
        let yb = tape.leaf(ybar.to_vec())?;
        let y = tape.add(yb, ev)?;
        let (out, value) = session.record(&mut tape, y)?;
        let grad = if want_grad {
            tape.backward(out)?.wrt(&tape, ev)
        } else {
            Vec::new()
        };
        Ok((value, grad))
    };

    for step in 0..cfg.steps {
        let (value, grad) = surrogate(&mut session, &e, true).map_err(|err| (step, err))?;
        trace.push(value);
        if value > best.0 {
            best = (value, e.clone());
        }
        // ascent: Adam minimizes, so feed the negated gradient
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        adam.step(&mut e, &neg).map_err(|err| (step, err))?;
        e = project_ball_slice(&e, &zero, cfg.eta);
    }
    let (value, _) = surrogate(&mut session, &e, false).map_err(|err| (cfg.steps, err))?;
    trace.push(value);
    if value > best.0 {
        best = (value, e.clone());
    }

    let cand_value = obj
        .evaluate(&tensor::add(ybar, &best.1))
        .map_err(|err| (cfg.steps, err))?;
    let (e, value) = if cand_value >= init_value {
        (best.1, cand_value)
    } else {
        (project_ball_slice(&init, &zero, cfg.eta), init_value)
    };
    Ok(RestartOutcome { e, value, trace })
}

fn run_attack(
    obj: &dyn Objective,
    ybar: &[f64],
    cfg: &AttackConfig,
    extra_inits: &[Tensor],
) -> Result<AttackResult> {
    cfg.validate()?;
    let m = ybar.len();
    let mut inits: Vec<(InitKind, Vec<f64>)> = Vec::new();
    if cfg.include_zero_init || cfg.eta == 0.0 {
        inits.push((InitKind::Zero, vec![0.0; m]));
    }
    for t in extra_inits {
        if t.len() != m {
            return Err(contract(format!(
                "supplied init has length {}, expected {m}",
                t.len()
            )));
        }
        inits.push((InitKind::Supplied, t.data().to_vec()));
    }
    if cfg.eta > 0.0 {
        for r in 0..cfg.restarts {
            let mut g = rng::stream(cfg.seed, &[rng::name_key("attack_init"), r as u64]);
            inits.push((InitKind::Random, uniform_in_ball(m, cfg.eta, &mut g)));
        }
    }

    let outcomes: Vec<_> = inits
        .par_iter()
        .map(|(_, init)| run_restart(obj, ybar, init.clone(), cfg))
        .collect();

    let mut per_restart = Vec::with_capacity(outcomes.len());
    let mut winner: Option<RestartOutcome> = None;
    for (restart, (out, (kind, _))) in outcomes.into_iter().zip(&inits).enumerate() {
        let out = out.map_err(|(step, source)| Error::Attack {
            restart,
            step,
            source: Box::new(source),
        })?;
        per_restart.push(RestartRecord {
            init: *kind,
            value: out.value,
        });
        if winner.as_ref().is_none_or(|w| out.value > w.value) {
            winner = Some(out);
        }
    }
    let w = winner.ok_or_else(|| contract("attack ran no restarts"))?;
    Ok(AttackResult {
        e_adv: Tensor::from_vec(w.e),
        achieved_error: w.value,
        per_restart,
        trace: w.trace,
        eta: cfg.eta,
    })
}

/// Projected Adam ascent on `‖rec(A x̄ + e) − x̄‖` over `‖e‖ ≤ eta`.
/// `extra_inits` are added to the zero and random starting points.
pub fn find_adversarial(
    rec: &dyn ReconMap,
    a: &dyn LinearOperator,
    xbar: &Tensor,
    cfg: &AttackConfig,
    extra_inits: &[Tensor],
) -> Result<AttackResult> {
    if xbar.len() != a.cols() || rec.measurement_dim() != a.rows() || rec.signal_dim() != a.cols() {
        return Err(contract(
            "find_adversarial: dimensions of map, operator and signal differ",
        ));
    }
    let xnorm = xbar.norm();
    if xnorm == 0.0 {
        return Err(contract("find_adversarial: ground truth is zero"));
    }
    let ybar = a.apply(xbar.data());
    let obj = ReconError {
        rec,
        xbar: xbar.data(),
        xnorm,
    };
    run_attack(&obj, &ybar, cfg, extra_inits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginResult {
    pub attack: AttackResult,
    pub predicted: usize,
    pub flipped: bool,
}

/// Projected Adam ascent on the classification margin
/// `max_{k≠c} logit_k − logit_c` of `pipeline(A x̄ + e)`.
pub fn margin_attack(
    pipeline: &Pipeline<'_>,
    a: &dyn LinearOperator,
    xbar: &Tensor,
    class: usize,
    cfg: &AttackConfig,
    extra_inits: &[Tensor],
) -> Result<MarginResult> {
    if class >= pipeline.classifier.classes() {
        return Err(contract(format!("class {class} out of range")));
    }
    if xbar.len() != a.cols() || pipeline.rec.measurement_dim() != a.rows() {
        return Err(contract("margin_attack: dimensions differ"));
    }
    let ybar = a.apply(xbar.data());
    let obj = Margin { pipeline, class };
    let attack = run_attack(&obj, &ybar, cfg, extra_inits)?;
    let predicted = pipeline.predict(&tensor::add(&ybar, attack.e_adv.data()))?;
    Ok(MarginResult {
        flipped: predicted != class,
        predicted,
        attack,
    })
}

/// Relative error of `rec` on `A x̄ + e`.
pub fn transfer_eval(
    e: &Tensor,
    rec: &dyn ReconMap,
    a: &dyn LinearOperator,
    xbar: &Tensor,
) -> Result<f64> {
    if e.len() != a.rows() || xbar.len() != a.cols() {
        return Err(contract("transfer_eval: dimensions differ"));
    }
    let xnorm = xbar.norm();
    if xnorm == 0.0 {
        return Err(contract("transfer_eval: ground truth is zero"));
    }
    let y = tensor::add(&a.apply(xbar.data()), e.data());
    let x = rec.reconstruct(&y)?;
    Ok(tensor::norm2(&tensor::sub(&x, xbar.data())) / xnorm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::DenseOperator;
    use crate::recon::MatrixRecon;
    use std::sync::Arc;

    fn toy() -> (MatrixRecon, DenseOperator, Tensor) {
        let b = Arc::new(Tensor::new(vec![2, 2], vec![2.0, 1.0, 0.5, 3.0]).unwrap());
        let a =
            DenseOperator::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        (
            MatrixRecon::new("lin", b).unwrap(),
            a,
            Tensor::from_vec(vec![1.0, -0.5]),
        )
    }

    #[test]
    fn empty_budget_returns_zero_perturbation() {
        let (rec, a, x) = toy();
        let cfg = AttackConfig {
            eta: 0.0,
            ..Default::default()
        };
        let r = find_adversarial(&rec, &a, &x, &cfg, &[]).unwrap();
        assert!(r.e_adv.data().iter().all(|&v| v == 0.0));
        let base = transfer_eval(&Tensor::zeros(&[2]), &rec, &a, &x).unwrap();
        assert_eq!(r.achieved_error, base);
    }

    #[test]
    fn restarts_are_feasible_and_winner_is_max() {
        let (rec, a, x) = toy();
        let cfg = AttackConfig {
            eta: 0.3,
            steps: 30,
            ..Default::default()
        };
        let r = find_adversarial(&rec, &a, &x, &cfg, &[]).unwrap();
        assert!(r.e_adv.norm() <= 0.3 * (1.0 + 1e-9));
        let max = r
            .per_restart_errors()
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.achieved_error, max);
        assert_eq!(r.per_restart.len(), 6);
        assert_eq!(r.per_restart[0].init, InitKind::Zero);
    }

    #[test]
    fn margin_of_logits() {
        assert_eq!(margin(&[1.0, 3.0, 2.0], 1), -1.0);
        assert_eq!(margin(&[1.0, 3.0, 2.0], 0), 2.0);
    }

    #[test]
    fn uniform_ball_draws_stay_inside() {
        let mut r = rng::stream(1, &[]);
        for _ in 0..100 {
            assert!(tensor::norm2(&uniform_in_ball(5, 0.7, &mut r)) <= 0.7);
        }
    }
}
