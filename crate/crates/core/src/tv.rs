//! Total-variation minimization by ADMM.
//!
//! Two formulations share one solver:
//!
//! * constrained: `min ‖∇x‖₁  s.t. ‖Ax − y‖ ≤ eta`, split as `z = ∇x`,
//!   `w = Ax`;
//! * unconstrained: `min λ‖∇x‖₁ + ‖Ax − y‖²`, split as `z = ∇x`.
//!
//! The x-update is an exact solve with a cached Cholesky factor, which also
//! makes the unrolled variant ([`TvSolver::unrolled`]) cleanly
//! differentiable with respect to the measurements.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::attacks::noise::{sample_statistical_noise, NoiseKind};
use crate::error::{config, contract, Error, Result};
use crate::operators::{regularized_normal_matrix, LinearOperator, SpdFactor};
use crate::prox::{project_ball_slice, soft_threshold_slice};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// Consecutive merit increases that count as divergence.
pub const DIVERGENCE_WINDOW: usize = 50;

struct StepInfo {
    objective: f64,
    primal: f64,
    dual: f64,
    primal_scale: f64,
    dual_scale: f64,
}

/// Safeguarded type-II Anderson acceleration of the map
/// `(z, u, w, v) -> (z', u', w', v')`. A step that fails to shrink the
/// fixed-point residual is rolled back to the plain iterate.
struct Anderson {
    memory: usize,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    dg: Vec<Vec<f64>>,
    df: Vec<Vec<f64>>,
    fallback: Option<(Vec<f64>, f64)>,
}

fn flatten(s: &AdmmState) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * s.z.len() + 2 * s.w.len());
    out.extend_from_slice(&s.z);
    out.extend_from_slice(&s.u);
    out.extend_from_slice(&s.w);
    out.extend_from_slice(&s.v);
    out
}

fn unflatten(v: &[f64], s: &mut AdmmState) {
    let (p, m) = (s.z.len(), s.w.len());
    s.z.copy_from_slice(&v[..p]);
    s.u.copy_from_slice(&v[p..2 * p]);
    s.w.copy_from_slice(&v[2 * p..2 * p + m]);
    s.v.copy_from_slice(&v[2 * p + m..]);
}

impl Anderson {
    fn new(memory: usize) -> Self {
        Self {
            memory,
            prev: None,
            dg: Vec::new(),
            df: Vec::new(),
            fallback: None,
        }
    }

    fn reset(&mut self) {
        self.prev = None;
        self.dg.clear();
        self.df.clear();
        self.fallback = None;
    }

    /// `input` was mapped to `s`; replaces `s` by the extrapolated point.
    fn advance(&mut self, input: &AdmmState, s: &mut AdmmState) {
        if self.memory == 0 {
            return;
        }
        let g = flatten(s);
        let f = tensor::sub(&g, &flatten(input));
        let fnorm = tensor::norm2(&f);

        if let Some((g_safe, f_safe)) = self.fallback.take() {
            if fnorm > f_safe {
                unflatten(&g_safe, s);
                self.reset();
                return;
            }
        }

        if let Some((g_prev, f_prev)) = self.prev.take() {
            self.dg.push(tensor::sub(&g, &g_prev));
            self.df.push(tensor::sub(&f, &f_prev));
            if self.dg.len() > self.memory {
                self.dg.remove(0);
                self.df.remove(0);
            }
        }
        self.prev = Some((g.clone(), f.clone()));
        if self.df.is_empty() {
            return;
        }

        let k = self.df.len();
        let gram = nalgebra::DMatrix::from_fn(k, k, |i, j| tensor::dot(&self.df[i], &self.df[j]));
        let reg = 1e-10 * gram.trace().max(f64::MIN_POSITIVE);
        let gram = gram + nalgebra::DMatrix::identity(k, k) * reg;
        let rhs = nalgebra::DVector::from_fn(k, |i, _| tensor::dot(&self.df[i], &f));
        let Some(gamma) = gram.cholesky().map(|c| c.solve(&rhs)) else {
            self.reset();
            return;
        };
        let mut next = g.clone();
        for (j, dg) in self.dg.iter().enumerate() {
            tensor::axpy(-gamma[j], dg, &mut next);
        }
        if next.iter().all(|v| v.is_finite()) {
            unflatten(&next, s);
            self.fallback = Some((g, fnorm));
        } else {
            self.reset();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmConfig {
    pub rho: f64,
    pub max_iters: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub unroll_iters: usize,
    /// History length of the Anderson extrapolation of the iteration map;
    /// 0 runs plain ADMM.
    pub anderson_memory: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iters: 5000,
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            unroll_iters: 25,
            anderson_memory: 10,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(config(format!("ADMM rho must be > 0, got {}", self.rho)));
        }
        if self.max_iters < 1 {
            return Err(config("ADMM max_iters must be >= 1"));
        }
        if !(self.tol_primal > 0.0 && self.tol_dual > 0.0) {
            return Err(config("ADMM tolerances must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvMode {
    Constrained { eta: f64 },
    Unconstrained { lambda: f64 },
}

impl TvMode {
    fn validate(&self) -> Result<()> {
        match *self {
            TvMode::Constrained { eta } if !(eta >= 0.0) => {
                Err(config(format!("constrained TV needs eta >= 0, got {eta}")))
            }
            TvMode::Unconstrained { lambda } if !(lambda > 0.0) => Err(config(format!(
                "unconstrained TV needs lambda > 0, got {lambda}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Primal and scaled dual variables; `w`, `v` are empty in unconstrained
/// mode. `rho` is the penalty the duals are scaled by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Debug, Clone)]
pub struct TvSolution {
    pub x: Tensor,
    pub state: AdmmState,
    pub iters: usize,
    pub converged: bool,
    pub trace: Vec<IterRecord>,
}

impl TvSolution {
    /// Dumps the convergence trace as CSV.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iter,objective,primal_residual,dual_residual")?;
        for (i, r) in self.trace.iter().enumerate() {
            writeln!(
                f,
                "{},{:.16e},{:.16e},{:.16e}",
                i + 1,
                r.objective,
                r.primal_residual,
                r.dual_residual
            )?;
        }
        Ok(())
    }
}

/// A TV instance: operator, gradient, measurements and formulation.
#[derive(Debug, Clone)]
pub struct TvProblem {
    pub a: Arc<dyn LinearOperator>,
    pub grad: Arc<dyn LinearOperator>,
    pub y: Tensor,
    pub mode: TvMode,
}

/// One-shot solve; builds (and discards) the factorization.
pub fn tv_solve(
    problem: &TvProblem,
    cfg: &AdmmConfig,
    warm: Option<&AdmmState>,
) -> Result<TvSolution> {
    TvSolver::new(
        Arc::clone(&problem.a),
        Arc::clone(&problem.grad),
        cfg.clone(),
    )?
    .solve(&problem.y, problem.mode, warm)
}

/// Records `cfg.unroll_iters` ADMM iterations from `warm` on `tape`.
pub fn tv_unrolled(
    problem: &TvProblem,
    cfg: &AdmmConfig,
    warm: &AdmmState,
    tape: &mut Tape,
    y: Var,
) -> Result<Var> {
    TvSolver::new(
        Arc::clone(&problem.a),
        Arc::clone(&problem.grad),
        cfg.clone(),
    )?
    .unrolled(tape, y, problem.mode, warm, cfg.unroll_iters)
}

/// ADMM solver bound to an operator pair; factorizations are built lazily
/// and reused across solves.
#[derive(Debug)]
pub struct TvSolver {
    a: Arc<dyn LinearOperator>,
    grad: Arc<dyn LinearOperator>,
    cfg: AdmmConfig,
    constrained: OnceLock<Arc<SpdFactor>>,
    unconstrained: Mutex<Vec<(u64, Arc<SpdFactor>)>>,
}

impl TvSolver {
    pub fn new(
        a: Arc<dyn LinearOperator>,
        grad: Arc<dyn LinearOperator>,
        cfg: AdmmConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if grad.cols() != a.cols() {
            return Err(contract("gradient and operator act on different spaces"));
        }
        Ok(Self {
            a,
            grad,
            cfg,
            constrained: OnceLock::new(),
            unconstrained: Mutex::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &AdmmConfig {
        &self.cfg
    }

    pub fn operator(&self) -> &Arc<dyn LinearOperator> {
        &self.a
    }

    pub fn gradient(&self) -> &Arc<dyn LinearOperator> {
        &self.grad
    }

    fn factor(&self, mode: TvMode, rho: f64) -> Result<Arc<SpdFactor>> {
        match mode {
            TvMode::Constrained { .. } => {
                if let Some(f) = self.constrained.get() {
                    return Ok(Arc::clone(f));
                }
                let q = regularized_normal_matrix(self.a.as_ref(), self.grad.as_ref(), 1.0, 1.0)?;
                let f = Arc::new(SpdFactor::new(&q, self.a.cols())?);
                Ok(Arc::clone(self.constrained.get_or_init(|| f)))
            }
            TvMode::Unconstrained { .. } => {
                let key = rho.to_bits();
                let mut cache = self.unconstrained.lock().expect("factor cache poisoned");
                if let Some((_, f)) = cache.iter().find(|(k, _)| *k == key) {
                    return Ok(Arc::clone(f));
                }
                let q = regularized_normal_matrix(self.a.as_ref(), self.grad.as_ref(), 2.0, rho)?;
                let f = Arc::new(SpdFactor::new(&q, self.a.cols())?);
                cache.push((key, Arc::clone(&f)));
                Ok(f)
            }
        }
    }

    fn initial_state(&self, mode: TvMode, warm: Option<&AdmmState>) -> AdmmState {
        let (n, p, m) = (self.a.cols(), self.grad.rows(), self.a.rows());
        let constrained = matches!(mode, TvMode::Constrained { .. });
        let mut s = match warm {
            Some(w) if w.x.len() == n && w.z.len() == p && w.u.len() == p => w.clone(),
            _ => AdmmState {
                x: vec![0.0; n],
                z: vec![0.0; p],
                u: vec![0.0; p],
                w: Vec::new(),
                v: Vec::new(),
                rho: self.cfg.rho,
            },
        };
        if !(s.rho > 0.0 && s.rho.is_finite()) {
            s.rho = self.cfg.rho;
        }
        if constrained {
            if s.w.len() != m || s.v.len() != m {
                s.w = self.a.apply(&s.x);
                s.v = vec![0.0; m];
            }
        } else {
            s.w.clear();
            s.v.clear();
        }
        s
    }

    /// Solves the TV problem for measurements `y`.
    pub fn solve(&self, y: &Tensor, mode: TvMode, warm: Option<&AdmmState>) -> Result<TvSolution> {
        mode.validate()?;
        if y.len() != self.a.rows() {
            return Err(contract(format!(
                "measurements have length {}, operator has {} rows",
                y.len(),
                self.a.rows()
            )));
        }
        let mut s = self.initial_state(mode, warm);
        let factor = self.factor(mode, s.rho)?;
        let y = y.data();
        let aty = self.a.adjoint(y);
        let mut accel = Anderson::new(self.cfg.anderson_memory);

        let mut trace = Vec::new();
        let mut rising = 0usize;
        let mut converged = false;
        let mut prev_obj = f64::INFINITY;

        for iter in 1..=self.cfg.max_iters {
            let input = s.clone();
            let it = self.step(mode, y, &aty, &factor, &mut s);
            if !(it.objective.is_finite() && it.primal.is_finite() && it.dual.is_finite()) {
                return Err(Error::Numerical(format!(
                    "ADMM produced non-finite values at iteration {iter}"
                )));
            }
            trace.push(IterRecord {
                objective: it.objective,
                primal_residual: it.primal,
                dual_residual: it.dual,
            });

            let merit = |r: &IterRecord| match mode {
                TvMode::Constrained { .. } => r.primal_residual,
                TvMode::Unconstrained { .. } => r.objective,
            };
            if trace.len() >= 2 {
                let k = trace.len();
                rising = if merit(&trace[k - 1]) > merit(&trace[k - 2]) {
                    rising + 1
                } else {
                    0
                };
                if rising >= DIVERGENCE_WINDOW {
                    let tail = trace[k - DIVERGENCE_WINDOW..].iter().map(merit).collect();
                    return Err(Error::Diverged {
                        iters: iter,
                        trace: tail,
                    });
                }
            }

            let primal_ok = it.primal <= self.cfg.tol_primal * it.primal_scale.max(1.0);
            let dual_ok = it.dual <= self.cfg.tol_dual * it.dual_scale.max(1.0);
            let objective_ok = match mode {
                TvMode::Constrained { .. } => true,
                TvMode::Unconstrained { .. } => {
                    (prev_obj - it.objective).abs()
                        <= self.cfg.tol_dual * it.objective.abs().max(1.0)
                }
            };
            prev_obj = it.objective;
            if primal_ok && dual_ok && objective_ok {
                converged = true;
                break;
            }

            accel.advance(&input, &mut s);
        }

        let iters = trace.len();
        Ok(TvSolution {
            x: Tensor::from_vec(s.x.clone()),
            state: s,
            iters,
            converged,
            trace,
        })
    }

    /// One ADMM iteration in place.
    fn step(
        &self,
        mode: TvMode,
        y: &[f64],
        aty: &[f64],
        factor: &SpdFactor,
        s: &mut AdmmState,
    ) -> StepInfo {
        let (p, m) = (self.grad.rows(), self.a.rows());
        let rho = s.rho;

        // x-update
        let mut rhs = self.grad.adjoint(&tensor::sub(&s.z, &s.u));
        match mode {
            TvMode::Constrained { .. } => {
                let at = self.a.adjoint(&tensor::sub(&s.w, &s.v));
                tensor::axpy(1.0, &at, &mut rhs);
            }
            TvMode::Unconstrained { .. } => {
                rhs.iter_mut().for_each(|r| *r *= rho);
                tensor::axpy(2.0, aty, &mut rhs);
            }
        }
        factor.solve_in_place(&mut rhs);
        s.x = rhs;
        let gx = self.grad.apply(&s.x);
        let ax = self.a.apply(&s.x);

        // z-update and dual ascent
        let tau = match mode {
            TvMode::Constrained { .. } => 1.0 / rho,
            TvMode::Unconstrained { lambda } => lambda / rho,
        };
        let z_old = std::mem::replace(&mut s.z, soft_threshold_slice(&tensor::add(&gx, &s.u), tau));
        for i in 0..p {
            s.u[i] += gx[i] - s.z[i];
        }
        let mut dual_vec = self.grad.adjoint(&tensor::sub(&s.z, &z_old));
        let rz = tensor::sub(&gx, &s.z);
        let mut primal_sq = tensor::dot(&rz, &rz);
        let mut scale_sq = tensor::dot(&gx, &gx).max(tensor::dot(&s.z, &s.z));
        let tv: f64 = gx.iter().map(|v| v.abs()).sum();

        let objective = match mode {
            TvMode::Constrained { eta } => {
                let w_old = std::mem::replace(
                    &mut s.w,
                    project_ball_slice(&tensor::add(&ax, &s.v), y, eta),
                );
                for i in 0..m {
                    s.v[i] += ax[i] - s.w[i];
                }
                tensor::axpy(
                    1.0,
                    &self.a.adjoint(&tensor::sub(&s.w, &w_old)),
                    &mut dual_vec,
                );
                let rw = tensor::sub(&ax, &s.w);
                primal_sq += tensor::dot(&rw, &rw);
                scale_sq += tensor::dot(&ax, &ax).max(tensor::dot(&s.w, &s.w));
                tv
            }
            TvMode::Unconstrained { lambda } => {
                let r = tensor::sub(&ax, y);
                lambda * tv + tensor::dot(&r, &r)
            }
        };

        let mut dual_ref = self.grad.adjoint(&s.u);
        if !s.v.is_empty() {
            tensor::axpy(1.0, &self.a.adjoint(&s.v), &mut dual_ref);
        }
        StepInfo {
            objective,
            primal: primal_sq.sqrt(),
            dual: rho * tensor::norm2(&dual_vec),
            primal_scale: scale_sq.sqrt(),
            dual_scale: rho * tensor::norm2(&dual_ref),
        }
    }

    /// Records `iters` ADMM iterations starting from `warm` on `tape`, with
    /// the measurements `y` as a differentiable input.
    pub fn unrolled(
        &self,
        tape: &mut Tape,
        y: Var,
        mode: TvMode,
        warm: &AdmmState,
        iters: usize,
    ) -> Result<Var> {
        if !tape.is_live() {
            return Err(contract("tv_unrolled needs a live tape"));
        }
        mode.validate()?;
        if tape.value(y).len() != self.a.rows() {
            return Err(contract("tv_unrolled: measurement length"));
        }
        let s = self.initial_state(mode, Some(warm));
        if warm.x.len() != self.a.cols() {
            return Err(contract("tv_unrolled: warm state has wrong dimensions"));
        }
        let mut x = tape.leaf(s.x)?;
        if iters == 0 {
            return Ok(x);
        }
        let rho = s.rho;
        let factor = self.factor(mode, rho)?;
        let mut z = tape.leaf(s.z)?;
        let mut u = tape.leaf(s.u)?;

        match mode {
            TvMode::Constrained { eta } => {
                let mut w = tape.leaf(s.w)?;
                let mut v = tape.leaf(s.v)?;
                for _ in 0..iters {
                    let zu = tape.sub(z, u)?;
                    let gt = tape.adjoint(&self.grad, zu)?;
                    let wv = tape.sub(w, v)?;
                    let at = tape.adjoint(&self.a, wv)?;
                    let rhs = tape.add(gt, at)?;
                    x = tape.solve(&factor, rhs)?;
                    let gx = tape.apply(&self.grad, x)?;
                    let ax = tape.apply(&self.a, x)?;
                    let zin = tape.add(gx, u)?;
                    z = tape.soft_threshold(zin, 1.0 / rho)?;
                    let win = tape.add(ax, v)?;
                    w = tape.project_ball(win, y, eta)?;
                    let ug = tape.add(u, gx)?;
                    u = tape.sub(ug, z)?;
                    let va = tape.add(v, ax)?;
                    v = tape.sub(va, w)?;
                }
            }
            TvMode::Unconstrained { lambda } => {
                let aty = tape.adjoint(&self.a, y)?;
                let aty2 = tape.scale(aty, 2.0)?;
                for _ in 0..iters {
                    let zu = tape.sub(z, u)?;
                    let gt = tape.adjoint(&self.grad, zu)?;
                    let gt = tape.scale(gt, rho)?;
                    let rhs = tape.add(gt, aty2)?;
                    x = tape.solve(&factor, rhs)?;
                    let gx = tape.apply(&self.grad, x)?;
                    let zin = tape.add(gx, u)?;
                    z = tape.soft_threshold(zin, lambda / rho)?;
                    let ug = tape.add(u, gx)?;
                    u = tape.sub(ug, z)?;
                }
            }
        }
        Ok(x)
    }
}

/// For each noise level (relative to `‖A x̄‖`), the λ from `lambda_grid`
/// minimizing the mean relative reconstruction error of unconstrained TV
/// under Gaussian noise. Ties go to the smaller grid index.
pub fn select_lambda(
    solver: &TvSolver,
    signals: &[Tensor],
    eta_grid: &[f64],
    lambda_grid: &[f64],
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if eta_grid.is_empty() || lambda_grid.is_empty() || signals.is_empty() {
        return Err(config("select_lambda needs nonempty grids and signals"));
    }
    let a = solver.operator();
    let mut out = Vec::with_capacity(eta_grid.len());
    for (ei, &rel) in eta_grid.iter().enumerate() {
        let noisy: Vec<Tensor> = signals
            .iter()
            .enumerate()
            .map(|(si, x)| {
                let ybar = a.apply(x.data());
                let eta = rel * tensor::norm2(&ybar);
                let mut r = rng::stream(seed, &[ei as u64, si as u64]);
                let e = sample_statistical_noise(NoiseKind::Gaussian, ybar.len(), eta, &mut r)?;
                Ok(Tensor::from_vec(tensor::add(&ybar, e.data())))
            })
            .collect::<Result<_>>()?;

        let mut best = (f64::INFINITY, lambda_grid[0]);
        if lambda_grid.len() > 1 {
            for &lambda in lambda_grid {
                let mut total = 0.0;
                for (x, y) in signals.iter().zip(&noisy) {
                    let sol = solver.solve(y, TvMode::Unconstrained { lambda }, None)?;
                    total += tensor::norm2(&tensor::sub(sol.x.data(), x.data())) / x.norm();
                }
                let mean = total / signals.len() as f64;
                if mean < best.0 {
                    best = (mean, lambda);
                }
            }
        }
        out.push((rel, best.1));
    }
    Ok(out)
}


/// Objectives of accepted iterations: those that do not increase the
/// objective of the previously accepted one.
pub fn accepted_objectives(trace: &[IterRecord]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for r in trace {
        match out.last() {
            Some(&prev) if r.objective > prev + 1e-10 => {}
            _ => out.push(r.objective),
        }
    }
    out
}
