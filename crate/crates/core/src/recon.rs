//! Reconstruction maps `R^m → R^N` behind one interface, so attacks,
//! curves and transfer tests treat model-based and learned methods alike.

use std::sync::Arc;

use crate::error::{contract, Result};
use crate::nets::ReconNet;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tv::{AdmmState, TvMode, TvSolver};

/// A reconstruction method.
pub trait ReconMap: Send + Sync {
    fn name(&self) -> &str;

    fn measurement_dim(&self) -> usize;

    fn signal_dim(&self) -> usize;

    /// Full-accuracy evaluation.
    fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>>;

    /// Starts a differentiable session for measurements near `y0`.
    fn session(&self, y0: &[f64]) -> Result<Box<dyn ReconSession + '_>>;
}

/// Records the map on a tape; may keep state (warm starts) between calls.
pub trait ReconSession {
    fn record(&mut self, tape: &mut Tape, y: Var) -> Result<Var>;
}

/// `y ↦ M y` for a fixed `N x m` matrix (e.g. the Tikhonov inverse).
#[derive(Debug, Clone)]
pub struct MatrixRecon {
    name: String,
    matrix: Arc<Tensor>,
}

impl MatrixRecon {
    pub fn new(name: impl Into<String>, matrix: Arc<Tensor>) -> Result<Self> {
        matrix.dims2()?;
        Ok(Self {
            name: name.into(),
            matrix,
        })
    }
}

struct MatrixSession<'a>(&'a MatrixRecon);

impl ReconSession for MatrixSession<'_> {
    fn record(&mut self, tape: &mut Tape, y: Var) -> Result<Var> {
        tape.matvec(&self.0.matrix, y)
    }
}

impl ReconMap for MatrixRecon {
    fn name(&self) -> &str {
        &self.name
    }

    fn measurement_dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    fn signal_dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.matrix.matvec(y)
    }

    fn session(&self, _y0: &[f64]) -> Result<Box<dyn ReconSession + '_>> {
        Ok(Box::new(MatrixSession(self)))
    }
}

pub const DEFAULT_REFRESH_EVERY: usize = 25;

/// TV minimization; sessions record warm-started unrolled ADMM and refresh
/// the warm state with a full solve every `refresh_every` recordings.
#[derive(Debug, Clone)]
pub struct TvRecon {
    name: String,
    solver: Arc<TvSolver>,
    mode: TvMode,
    refresh_every: usize,
}

impl TvRecon {
    pub fn new(name: impl Into<String>, solver: Arc<TvSolver>, mode: TvMode) -> Self {
        Self {
            name: name.into(),
            solver,
            mode,
            refresh_every: DEFAULT_REFRESH_EVERY,
        }
    }

    pub fn with_refresh_every(mut self, every: usize) -> Self {
        self.refresh_every = every.max(1);
        self
    }

    pub fn mode(&self) -> TvMode {
        self.mode
    }

    pub fn solver(&self) -> &Arc<TvSolver> {
        &self.solver
    }

    /// Full solve warm-started from `warm`.
    pub fn solve_from(&self, y: &[f64], warm: Option<&AdmmState>) -> Result<crate::tv::TvSolution> {
        self.solver
            .solve(&Tensor::from_vec(y.to_vec()), self.mode, warm)
    }
}

struct TvSession<'a> {
    rec: &'a TvRecon,
    warm: AdmmState,
    uses: usize,
}

impl ReconSession for TvSession<'_> {
    fn record(&mut self, tape: &mut Tape, y: Var) -> Result<Var> {
        if self.uses % self.rec.refresh_every == 0 {
            let y_now = tape.value(y).to_vec();
            self.warm = self.rec.solve_from(&y_now, Some(&self.warm))?.state;
        }
        self.uses += 1;
        let iters = self.rec.solver.config().unroll_iters;
        self.rec
            .solver
            .unrolled(tape, y, self.rec.mode, &self.warm, iters)
    }
}

impl ReconMap for TvRecon {
    fn name(&self) -> &str {
        &self.name
    }

    fn measurement_dim(&self) -> usize {
        self.solver.operator().rows()
    }

    fn signal_dim(&self) -> usize {
        self.solver.operator().cols()
    }

    fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.solve_from(y, None)?.x.into_data())
    }

    fn session(&self, y0: &[f64]) -> Result<Box<dyn ReconSession + '_>> {
        if y0.len() != self.measurement_dim() {
            return Err(contract("TV session: measurement length"));
        }
        let warm = self.solve_from(y0, None)?.state;
        Ok(Box::new(TvSession {
            rec: self,
            warm,
            uses: 0,
        }))
    }
}

/// A trained network as a reconstruction map.
#[derive(Debug, Clone)]
pub struct NetRecon {
    name: String,
    net: Arc<ReconNet>,
}

impl NetRecon {
    pub fn new(name: impl Into<String>, net: Arc<ReconNet>) -> Self {
        Self {
            name: name.into(),
            net,
        }
    }

    pub fn net(&self) -> &ReconNet {
        &self.net
    }
}

struct NetSession<'a>(&'a ReconNet);

impl ReconSession for NetSession<'_> {
    fn record(&mut self, tape: &mut Tape, y: Var) -> Result<Var> {
        self.0.record_input(tape, y)
    }
}

impl ReconMap for NetRecon {
    fn name(&self) -> &str {
        &self.name
    }

    fn measurement_dim(&self) -> usize {
        self.net.manifest().m
    }

    fn signal_dim(&self) -> usize {
        self.net.manifest().n
    }

    fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.forward(&Tensor::from_vec(y.to_vec()))?.into_data())
    }

    fn session(&self, _y0: &[f64]) -> Result<Box<dyn ReconSession + '_>> {
        Ok(Box::new(NetSession(&self.net)))
    }
}
