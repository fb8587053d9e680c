//! Statistical noise models normalized to `E‖e‖² = eta²`.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::tensor::Tensor;

/// Symmetrized Bernoulli probability used by default.
pub const DEFAULT_BERNOULLI_P: f64 = 0.025;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
    /// Entries `±b` with probability `p/2` each, zero otherwise.
    Bernoulli {
        p: f64,
    },
}

impl NoiseKind {
    pub fn label(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Uniform => "uniform",
            NoiseKind::Bernoulli { .. } => "bernoulli",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn sample_statistical_noise(
    kind: NoiseKind,
    m: usize,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if !(eta >= 0.0) {
        return Err(config(format!("noise level must be >= 0, got {eta}")));
    }
    if let NoiseKind::Bernoulli { p } = kind {
        if !(p > 0.0 && p < 1.0) {
            return Err(config(format!(
                "Bernoulli probability must be in (0, 1), got {p}"
            )));
        }
    }
    if m == 0 {
        return Ok(Tensor::zeros(&[0]));
    }
    let mf = m as f64;
    let data: Vec<f64> = match kind {
        NoiseKind::Gaussian => {
            let s = eta / mf.sqrt();
            (0..m)
                .map(|_| s * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect()
        }
        NoiseKind::Uniform => {
            let a = eta * (3.0 / mf).sqrt();
            (0..m)
                .map(|_| {
                    if a > 0.0 {
                        rng.random_range(-a..=a)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        NoiseKind::Bernoulli { p } => {
            let b = eta / (mf * p).sqrt();
            (0..m)
                .map(|_| {
                    let u: f64 = rng.random();
                    if u < p / 2.0 {
                        b
                    } else if u < p {
                        -b
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    Ok(Tensor::from_vec(data))
}
