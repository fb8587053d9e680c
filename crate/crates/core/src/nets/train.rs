use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{jitter_noise, ReconNet};
use crate::adam::AdamState;
use crate::error::{config, Error, Result};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Upper end of the uniform range of training noise norms; 0 trains on
    /// noiseless measurements.
    pub jitter_bound: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-5,
            jitter_bound: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config("epochs and batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.jitter_bound >= 0.0) {
            return Err(config("lr, weight_decay and jitter_bound must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch (data term plus weight decay).
    pub loss_history: Vec<f64>,
}

/// Evaluates `item` for each index in parallel and sums losses and
/// gradients in index order, so the result does not depend on the number
/// of worker threads.
pub(crate) fn summed_gradients<F>(indices: &[usize], dim: usize, item: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize) -> Result<(f64, Vec<f64>)> + Sync,
{
    let parts: Vec<Result<(f64, Vec<f64>)>> = indices.par_iter().map(|&i| item(i)).collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        tensor::axpy(1.0, &g, &mut grad);
    }
    Ok((loss, grad))
}

/// Mini-batch Adam on `mean ‖net(A x + e) − x‖² + μ‖θ‖²`, with `e` redrawn
/// every epoch.
pub fn train(net: &mut ReconNet, signals: &[Tensor], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if signals.is_empty() {
        return Err(config("training set is empty"));
    }
    let a = std::sync::Arc::clone(net.operator());
    let m = a.rows();
    let dim = net.params().len();
    let mut theta = net.params().flatten();
    let mut adam = AdamState::new(dim, cfg.lr);
    let mut order: Vec<usize> = (0..signals.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut shuffle = rng::stream(cfg.seed, &[rng::name_key("shuffle"), epoch as u64]);
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;

        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot = net.clone();
            let (loss, mut grad) = summed_gradients(idx, dim, |i| {
                let x = &signals[i];
                let mut r =
                    rng::stream(cfg.seed, &[rng::name_key("jitter"), epoch as u64, i as u64]);
                let e = jitter_noise(m, cfg.jitter_bound, &mut r)?;
                let y = tensor::add(&a.apply(x.data()), e.data());
                let mut tape = Tape::new();
                let yv = tape.leaf(y)?;
                let p = snapshot.params().leaves(&mut tape)?;
                let out = snapshot.record(&mut tape, yv, &p)?;
                let target = tape.leaf_tensor(x)?;
                let diff = tape.sub(out, target)?;
                let l = tape.squared_norm(diff)?;
                let g = tape.backward(l)?;
                let flat = p.iter().flat_map(|&v| g.wrt(&tape, v)).collect();
                Ok((tape.scalar(l), flat))
            })
            .map_err(|e| Error::Training {
                epoch,
                batch,
                reason: e.to_string(),
            })?;

            let scale = 1.0 / idx.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            tensor::axpy(2.0 * cfg.weight_decay, &theta, &mut grad);
            let total = loss * scale + cfg.weight_decay * tensor::dot(&theta, &theta);
            if !total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch,
                    reason: format!("non-finite loss {total}"),
                });
            }
            adam.step(&mut theta, &grad)?;
            net.params_mut().set_flat(&theta)?;
            epoch_loss += total;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(TrainReport {
        loss_history: history,
    })
}
