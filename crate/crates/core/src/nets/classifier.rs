use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::train::summed_gradients;
use super::{push_conv, ParamSet};
use crate::adam::AdamState;
use crate::container::Container;
use crate::error::{config, contract, Error, Result};
use crate::operators::LinearOperator;
use crate::rng;
use crate::tape::{softmax, Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub hidden: usize,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            hidden: 16,
            classes: 2,
            epochs: 60,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 1e-6,
            seed: 0,
        }
    }
}

/// `x[i+1] - x[i]` for `i < n - 1`.
#[derive(Debug, Clone, Copy)]
struct Differences(usize);

impl LinearOperator for Differences {
    fn rows(&self) -> usize {
        self.0 - 1
    }

    fn cols(&self) -> usize {
        self.0
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(x.windows(2)) {
            *o = w[1] - w[0];
        }
    }

    fn adjoint_into(&self, g: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &gi) in g.iter().enumerate() {
            out[i] -= gi;
            out[i + 1] += gi;
        }
    }
}

/// Differences → conv → ReLU → conv → ReLU → sum over length → dense →
/// ReLU → dense.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    len: usize,
    channels: usize,
    hidden: usize,
    classes: usize,
    params: ParamSet,
}

impl Classifier {
    pub fn new(len: usize, cfg: &ClassifierConfig) -> Result<Self> {
        if len < 2 || cfg.channels == 0 || cfg.hidden == 0 || cfg.classes < 2 {
            return Err(config(
                "classifier needs positive sizes and at least two classes",
            ));
        }
        let mut r = rng::stream(cfg.seed, &[rng::name_key("classifier_init")]);
        let mut params = ParamSet::default();
        push_conv(&mut params, "conv1", 1, cfg.channels, false, &mut r);
        push_conv(
            &mut params,
            "conv2",
            cfg.channels,
            cfg.channels,
            false,
            &mut r,
        );
        let std = (2.0 / cfg.channels as f64).sqrt();
        let w: Vec<f64> = (0..cfg.hidden * cfg.channels)
            .map(|_| {
                std * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r)
            })
            .collect();
        params.push("dense1.w", vec![cfg.hidden, cfg.channels], w);
        params.push("dense1.b", vec![cfg.hidden], vec![0.0; cfg.hidden]);
        params.push(
            "dense2.w",
            vec![cfg.classes, cfg.hidden],
            vec![0.0; cfg.classes * cfg.hidden],
        );
        params.push("dense2.b", vec![cfg.classes], vec![0.0; cfg.classes]);
        Ok(Self {
            len,
            channels: cfg.channels,
            hidden: cfg.hidden,
            classes: cfg.classes,
            params,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Records the class logits of `x`.
    pub fn record_logits(&self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<Var> {
        if tape.value(x).len() != self.len {
            return Err(contract(format!(
                "classifier expects length {}, got {}",
                self.len,
                tape.value(x).len()
            )));
        }
        let diff: Arc<dyn LinearOperator> = Arc::new(Differences(self.len));
        let d = tape.apply(&diff, x)?;
        let h = tape.conv1d(d, p[0], p[1], 1, self.channels)?;
        let h = tape.relu(h)?;
        let h = tape.conv1d(h, p[2], p[3], self.channels, self.channels)?;
        let h = tape.relu(h)?;
        let f = tape.channel_sum(h, self.channels)?;
        let h = tape.matvec_param(p[4], f, self.hidden, self.channels)?;
        let h = tape.add(h, p[5])?;
        let h = tape.relu(h)?;
        let o = tape.matvec_param(p[6], h, self.classes, self.hidden)?;
        tape.add(o, p[7])
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.leaf_tensor(x)?;
        let p = self.params.leaves(&mut tape)?;
        let o = self.record_logits(&mut tape, xv, &p)?;
        Ok(tape.value(o).to_vec())
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "version": 1,
            "len": self.len,
            "channels": self.channels,
            "hidden": self.hidden,
            "classes": self.classes,
        });
        let mut c = Container::with_meta(meta);
        self.params.push_into(&mut c)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let field = |k: &str| -> Result<usize> {
            c.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Validation {
                    path: format!("meta.{k}"),
                    reason: "missing or not an integer".into(),
                })
        };
        let cfg = ClassifierConfig {
            channels: field("channels")?,
            hidden: field("hidden")?,
            classes: field("classes")?,
            ..Default::default()
        };
        let mut out = Self::new(field("len")?, &cfg)?;
        out.params.pull_from(c)?;
        Ok(out)
    }
}

/// Class probabilities.
pub fn classifier_predict(clf: &Classifier, x: &Tensor) -> Result<Vec<f64>> {
    Ok(softmax(&clf.logits(x)?))
}

/// Trains on labeled features with mini-batch Adam on the cross-entropy.
pub fn classifier_train(
    features: &[Tensor],
    labels: &[usize],
    cfg: &ClassifierConfig,
) -> Result<Classifier> {
    if features.is_empty() {
        return Err(config("classifier training set is empty"));
    }
    if labels.len() != features.len() {
        return Err(config(format!(
            "classifier training needs one label per example ({} labels for {} examples)",
            labels.len(),
            features.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(config(format!(
            "label {bad} out of range for {} classes",
            cfg.classes
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(config("classifier epochs, batch size and lr must be valid"));
    }
    let mut clf = Classifier::new(features[0].len(), cfg)?;
    let dim = clf.params.len();
    let mut theta = clf.params.flatten();
    let mut adam = AdamState::new(dim, cfg.lr);
    let mut order: Vec<usize> = (0..features.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(
            cfg.seed,
            &[rng::name_key("classifier_shuffle"), epoch as u64],
        ));
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot = clf.clone();
            let (loss, mut grad) = summed_gradients(idx, dim, |i| {
                let mut tape = Tape::new();
                let xv = tape.leaf_tensor(&features[i])?;
                let p = snapshot.params.leaves(&mut tape)?;
                let o = snapshot.record_logits(&mut tape, xv, &p)?;
                let lp = tape.log_softmax(o)?;
                let pick = tape.pick(lp, labels[i])?;
                let nll = tape.scale(pick, -1.0)?;
                let g = tape.backward(nll)?;
                Ok((
                    tape.scalar(nll),
                    p.iter().flat_map(|&v| g.wrt(&tape, v)).collect(),
                ))
            })
            .map_err(|e| Error::Training {
                epoch,
                batch,
                reason: e.to_string(),
            })?;
            let scale = 1.0 / idx.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            tensor::axpy(2.0 * cfg.weight_decay, &theta, &mut grad);
            if !(loss * scale).is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch,
                    reason: "non-finite loss".into(),
                });
            }
            adam.step(&mut theta, &grad)?;
            clf.params.set_flat(&theta)?;
        }
    }
    Ok(clf)
}
