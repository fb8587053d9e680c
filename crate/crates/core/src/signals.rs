//! Synthetic signal distributions and dataset assembly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::noise::{sample_statistical_noise, NoiseKind};
use crate::container::Container;
use crate::error::{config, Error, Result};
use crate::operators::LinearOperator;
use crate::rng;
use crate::tensor::Tensor;

/// Piecewise-constant signals with zero boundary segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseConstantSpec {
    pub n: usize,
    pub jumps_min: usize,
    pub jumps_max: usize,
    pub amp_min: f64,
    pub amp_max: f64,
    pub min_gap: usize,
}

impl Default for PiecewiseConstantSpec {
    fn default() -> Self {
        Self {
            n: 256,
            jumps_min: 2,
            jumps_max: 6,
            amp_min: 0.5,
            amp_max: 2.0,
            min_gap: 10,
        }
    }
}

impl PiecewiseConstantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.jumps_min > self.jumps_max {
            return Err(config(format!(
                "jumps_min {} exceeds jumps_max {}",
                self.jumps_min, self.jumps_max
            )));
        }
        if self.min_gap < 1 {
            return Err(config("min_gap must be >= 1"));
        }
        if (self.jumps_max + 1) * self.min_gap > self.n {
            return Err(config(format!(
                "{} jumps with gap {} do not fit in N = {}",
                self.jumps_max, self.min_gap, self.n
            )));
        }
        if self.jumps_max > 0 && !(self.amp_min > 0.0 && self.amp_min <= self.amp_max) {
            return Err(config(format!(
                "amplitude bounds must satisfy 0 < amp_min <= amp_max, got [{}, {}]",
                self.amp_min, self.amp_max
            )));
        }
        if self.jumps_min == 1 && self.jumps_max == 1 {
            return Err(config(
                "a single jump cannot leave both boundary segments at zero",
            ));
        }
        Ok(())
    }

    /// Admissible jump counts; one jump is impossible with zero boundaries.
    fn jump_counts(&self) -> Vec<usize> {
        (self.jumps_min..=self.jumps_max)
            .filter(|&k| k != 1)
            .collect()
    }
}

/// Draws one signal from `spec`.
pub fn sample_piecewise_constant(
    spec: &PiecewiseConstantSpec,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    spec.validate()?;
    let counts = spec.jump_counts();
    let k = counts[rng.random_range(0..counts.len())];
    let n = spec.n;
    if k == 0 {
        return Ok(Tensor::zeros(&[n]));
    }

    // Segment lengths: k+1 segments, each at least min_gap long.
    let free = n - (k + 1) * spec.min_gap;
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut lengths = Vec::with_capacity(k + 1);
    let mut prev = 0;
    for &c in &cuts {
        lengths.push(spec.min_gap + c - prev);
        prev = c;
    }
    lengths.push(spec.min_gap + free - prev);

    let levels = sample_levels(spec, k, rng)?;
    let mut x = Vec::with_capacity(n);
    for (len, level) in lengths.iter().zip(&levels) {
        x.extend(std::iter::repeat_n(*level, *len));
    }
    debug_assert_eq!(x.len(), n);
    Ok(Tensor::from_vec(x))
}

/// Segment values `0, v1, .., v_{k-1}, 0` whose consecutive differences all
/// have magnitude in `[amp_min, amp_max]`.
fn sample_levels(spec: &PiecewiseConstantSpec, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let in_range = |d: f64| d.abs() >= spec.amp_min && d.abs() <= spec.amp_max;
    for _ in 0..100_000 {
        let mut levels = vec![0.0];
        for _ in 0..k - 1 {
            let a = rng.random_range(spec.amp_min..=spec.amp_max);
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            levels.push(levels.last().unwrap() + s * a);
        }
        if in_range(*levels.last().unwrap()) {
            levels.push(0.0);
            return Ok(levels);
        }
    }
    Err(config(format!(
        "could not draw {k} jumps with amplitudes in [{}, {}] returning to zero",
        spec.amp_min, spec.amp_max
    )))
}

/// Number of nonzero forward differences (jumps) of a 1-D signal.
pub fn jump_count(x: &[f64]) -> usize {
    x.windows(2).filter(|w| w[1] != w[0]).count()
}

/// Noise added to measurements at dataset assembly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum DatasetNoise {
    None,
    /// Statistical noise with `E‖e‖² = eta²`.
    Statistical {
        kind: NoiseKind,
        eta: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub signals: Vec<Tensor>,
    pub measurements: Vec<Tensor>,
    pub noise: DatasetNoise,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Result<Container> {
        let mut c = Container::with_meta(serde_json::json!({
            "noise": self.noise,
            "run": meta,
        }));
        c.push("signals", stack(&self.signals)?);
        c.push("measurements", stack(&self.measurements)?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let signals = unstack(
            c.get("signals")
                .ok_or_else(|| config("missing `signals`"))?,
        )?;
        let measurements = unstack(
            c.get("measurements")
                .ok_or_else(|| config("missing `measurements`"))?,
        )?;
        if signals.len() != measurements.len() {
            return Err(config("signal and measurement counts differ"));
        }
        let noise = serde_json::from_value(c.meta["noise"].clone()).unwrap_or(DatasetNoise::None);
        Ok(Self {
            signals,
            measurements,
            noise,
        })
    }
}

pub fn stack(rows: &[Tensor]) -> Result<Tensor> {
    let width = rows.first().map_or(0, Tensor::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(config("cannot stack tensors of different lengths"));
    }
    let data = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
    Tensor::new(vec![rows.len(), width], data)
}

pub fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    let (r, c) = t.dims2()?;
    Ok((0..r)
        .map(|i| Tensor::from_vec(t.data()[i * c..(i + 1) * c].to_vec()))
        .collect())
}

/// Draws `count` signals with per-signal streams derived from `seed`.
pub fn sample_signals(
    spec: &PiecewiseConstantSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|i| sample_piecewise_constant(spec, &mut rng::stream(seed, &[i as u64])))
        .collect()
}

/// Assembles `y_i = A x_i + e_i` for `count` sampled signals.
pub fn make_dataset(
    a: &dyn LinearOperator,
    spec: &PiecewiseConstantSpec,
    count: usize,
    noise: DatasetNoise,
    seed: u64,
) -> Result<Dataset> {
    if count < 1 {
        return Err(config("dataset needs at least one sample"));
    }
    if spec.n != a.cols() {
        return Err(config(format!(
            "signal length {} does not match operator input dimension {}",
            spec.n,
            a.cols()
        )));
    }
    let signals = sample_signals(spec, count, seed)?;
    dataset_from_signals(a, signals, noise, seed)
}

/// Measures given ground truths, adding noise from per-signal streams.
pub fn dataset_from_signals(
    a: &dyn LinearOperator,
    signals: Vec<Tensor>,
    noise: DatasetNoise,
    seed: u64,
) -> Result<Dataset> {
    let mut measurements = Vec::with_capacity(signals.len());
    for (i, x) in signals.iter().enumerate() {
        if x.len() != a.cols() {
            return Err(Error::Contract(format!(
                "signal {i} has length {}",
                x.len()
            )));
        }
        let mut y = a.apply(x.data());
        if let DatasetNoise::Statistical { kind, eta } = noise {
            let mut r = rng::stream(seed, &[i as u64, 0x6e6f697365]);
            let e = sample_statistical_noise(kind, y.len(), eta, &mut r)?;
            for (yi, ei) in y.iter_mut().zip(e.data()) {
                *yi += ei;
            }
        }
        measurements.push(Tensor::from_vec(y));
    }
    Ok(Dataset {
        signals,
        measurements,
        noise,
    })
}
