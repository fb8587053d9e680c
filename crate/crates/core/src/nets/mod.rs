//! Small differentiable reconstruction networks and a toy classifier.
//!
//! Every network keeps its parameters in a [`ParamSet`] (an ordered list of
//! named buffers) and records its forward pass on a [`Tape`], so the same
//! code serves inference, training and attacks.

mod classifier;
mod train;

pub use classifier::{classifier_predict, classifier_train, Classifier, ClassifierConfig};
pub use train::{train, TrainConfig, TrainReport};

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{config, contract, Error, Result};
use crate::operators::{LinearOperator, TikhonovInverse};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered, named parameter buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.data.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(contract(format!(
                "parameter vector has length {}, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| tensor::dot(&p.data, &p.data))
            .sum()
    }

    /// Records every buffer as a tape leaf, in order.
    pub fn leaves(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.data.clone()))
            .collect()
    }

    fn push_into(&self, c: &mut Container) -> Result<()> {
        for p in &self.params {
            c.push(
                format!("param/{}", p.name),
                Tensor::new(p.shape.clone(), p.data.clone())?,
            );
        }
        Ok(())
    }

    fn pull_from(&mut self, c: &Container) -> Result<()> {
        for p in &mut self.params {
            let key = format!("param/{}", p.name);
            let t = c.get(&key).ok_or_else(|| Error::Validation {
                path: key.clone(),
                reason: "missing parameter".into(),
            })?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::Validation {
                    path: key,
                    reason: format!("shape {:?}, expected {:?}", t.shape(), p.shape),
                });
            }
            p.data.copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// Encoder/decoder depth and per-level channel counts; kernel 3, pooling 2
/// and ReLU are fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub levels: usize,
    pub channels: Vec<usize>,
}

impl Default for ConvBlockSpec {
    fn default() -> Self {
        Self {
            levels: 3,
            channels: vec![16, 32, 64],
        }
    }
}

impl ConvBlockSpec {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(config(format!(
                "conv spec: {} levels but {} channel counts",
                self.levels,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(config("conv spec: channel counts must be positive"));
        }
        let div = POOL.pow(self.levels as u32 - 1);
        if len % div != 0 {
            return Err(config(format!(
                "signal length {len} is not divisible by {div}"
            )));
        }
        Ok(())
    }
}

fn he_init(cin: usize, cout: usize, rng: &mut impl Rng) -> Vec<f64> {
    let std = (2.0 / (cin * KERNEL) as f64).sqrt();
    (0..cout * cin * KERNEL)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

fn push_conv(
    ps: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    zero: bool,
    rng: &mut impl Rng,
) {
    let w = if zero {
        vec![0.0; cout * cin * KERNEL]
    } else {
        he_init(cin, cout, rng)
    };
    ps.push(format!("{name}.w"), vec![cout, cin, KERNEL], w);
    ps.push(format!("{name}.b"), vec![cout], vec![0.0; cout]);
}

/// Residual 1D U-Net: `x + head(decoder(encoder(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetLite {
    spec: ConvBlockSpec,
    len: usize,
}

impl UNetLite {
    pub fn new(spec: ConvBlockSpec, len: usize) -> Result<Self> {
        spec.validate(len)?;
        Ok(Self { spec, len })
    }

    pub fn spec(&self) -> &ConvBlockSpec {
        &self.spec
    }

    /// Appends freshly initialized parameters (final layer zero) to `ps`.
    pub fn init_params(&self, ps: &mut ParamSet, prefix: &str, rng: &mut impl Rng) {
        let ch = &self.spec.channels;
        for l in 0..self.spec.levels {
            let cin = if l == 0 { 1 } else { ch[l - 1] };
            push_conv(ps, &format!("{prefix}enc{l}a"), cin, ch[l], false, rng);
            push_conv(ps, &format!("{prefix}enc{l}b"), ch[l], ch[l], false, rng);
        }
        for l in (0..self.spec.levels - 1).rev() {
            push_conv(
                ps,
                &format!("{prefix}dec{l}a"),
                ch[l + 1] + ch[l],
                ch[l],
                false,
                rng,
            );
            push_conv(ps, &format!("{prefix}dec{l}b"), ch[l], ch[l], false, rng);
        }
        push_conv(ps, &format!("{prefix}head"), ch[0], 1, true, rng);
    }

    /// Number of tape leaves consumed by [`UNetLite::record`].
    pub fn param_count(&self) -> usize {
        2 * (2 * self.spec.levels + 2 * (self.spec.levels - 1) + 1)
    }

    /// Records the network on `x` (length `len`) using leaves `p` in
    /// [`UNetLite::init_params`] order.
    pub fn record(&self, tape: &mut Tape, x: Var, p: &[Var]) -> Result<Var> {
        if p.len() != self.param_count() {
            return Err(contract("UNetLite::record: wrong parameter count"));
        }
        let ch = &self.spec.channels;
        let mut k = 0;
        let mut conv =
            |tape: &mut Tape, h: Var, cin: usize, cout: usize, relu: bool| -> Result<Var> {
                let out = tape.conv1d(h, p[k], p[k + 1], cin, cout)?;
                k += 2;
                if relu {
                    tape.relu(out)
                } else {
                    Ok(out)
                }
            };

        let mut skips = Vec::with_capacity(self.spec.levels);
        let mut h = x;
        for l in 0..self.spec.levels {
            if l > 0 {
                h = tape.max_pool2(h, ch[l - 1])?;
            }
            let cin = if l == 0 { 1 } else { ch[l - 1] };
            h = conv(tape, h, cin, ch[l], true)?;
            h = conv(tape, h, ch[l], ch[l], true)?;
            skips.push(h);
        }
        for l in (0..self.spec.levels - 1).rev() {
            let up = tape.upsample2(h, ch[l + 1])?;
            let cat = tape.concat(up, skips[l])?;
            h = conv(tape, cat, ch[l + 1] + ch[l], ch[l], true)?;
            h = conv(tape, h, ch[l], ch[l], true)?;
        }
        let correction = conv(tape, h, ch[0], 1, false)?;
        debug_assert_eq!(tape.value(correction).len(), self.len);
        tape.add(x, correction)
    }
}

/// `x − lam·Aᵀ(Ax − y)`.
pub fn dc_layer(x: &Tensor, y: &Tensor, a: &dyn LinearOperator, lam: f64) -> Result<Tensor> {
    if x.len() != a.cols() || y.len() != a.rows() {
        return Err(contract("dc_layer: dimensions do not match the operator"));
    }
    let r = tensor::sub(&a.apply(x.data()), y.data());
    let g = a.adjoint(&r);
    Ok(Tensor::from_vec(
        x.data()
            .iter()
            .zip(&g)
            .map(|(xi, gi)| xi - lam * gi)
            .collect(),
    ))
}

fn dc_record(
    tape: &mut Tape,
    x: Var,
    y: Var,
    a: &Arc<dyn LinearOperator>,
    lam: Var,
) -> Result<Var> {
    let ax = tape.apply(a, x)?;
    let r = tape.sub(ax, y)?;
    let g = tape.adjoint(a, r)?;
    let step = tape.mul_scalar(g, lam)?;
    tape.sub(x, step)
}

/// Training noise: `t ~ U[0, bound]`, returns `(t/√m)·g` with `g` standard
/// normal, so that `E‖e‖ ≈ t`.
pub fn jitter_noise(m: usize, bound: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(bound >= 0.0) {
        return Err(config(format!("jitter bound must be >= 0, got {bound}")));
    }
    if bound == 0.0 {
        return Ok(Tensor::zeros(&[m]));
    }
    let t = rng.random_range(0.0..=bound);
    let s = t / (m as f64).sqrt();
    Ok(Tensor::from_vec(
        (0..m)
            .map(|_| s * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    /// `enhancer(T y)`
    Postproc,
    /// `enhancer(L y)` with learnable `L`, initialized to `T`
    FullyLearned,
    /// `K` rounds of `DC ∘ enhancer` after `T y`
    Iterative,
}

impl NetKind {
    pub fn label(self) -> &'static str {
        match self {
            NetKind::Postproc => "postproc",
            NetKind::FullyLearned => "fully_learned",
            NetKind::Iterative => "iterative",
        }
    }
}

/// Architecture description stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetManifest {
    pub version: u32,
    pub kind: NetKind,
    pub n: usize,
    pub m: usize,
    pub conv: ConvBlockSpec,
    pub iterations: usize,
    pub tikhonov_alpha: f64,
    pub dc_init: f64,
    pub init_seed: u64,
}

pub const DEFAULT_ITERATIONS: usize = 8;
pub const DEFAULT_DC_INIT: f64 = 0.1;

/// A reconstruction network `R^m → R^N`.
#[derive(Debug, Clone)]
pub struct ReconNet {
    manifest: NetManifest,
    a: Arc<dyn LinearOperator>,
    tikhonov: Arc<Tensor>,
    enhancer: UNetLite,
    params: ParamSet,
}

impl ReconNet {
    /// Builds a freshly initialized network. `tikhonov` is the fixed
    /// inversion layer (also the initial value of the learnable one).
    pub fn new(
        kind: NetKind,
        a: Arc<dyn LinearOperator>,
        tikhonov: &TikhonovInverse,
        conv: ConvBlockSpec,
        iterations: usize,
        seed: u64,
    ) -> Result<Self> {
        let manifest = NetManifest {
            version: 1,
            kind,
            n: a.cols(),
            m: a.rows(),
            conv,
            iterations: if kind == NetKind::Iterative {
                iterations
            } else {
                0
            },
            tikhonov_alpha: tikhonov.alpha(),
            dc_init: DEFAULT_DC_INIT,
            init_seed: seed,
        };
        Self::from_manifest(manifest, a, tikhonov.shared_matrix())
    }

    fn from_manifest(
        manifest: NetManifest,
        a: Arc<dyn LinearOperator>,
        tikhonov: Arc<Tensor>,
    ) -> Result<Self> {
        let (n, m) = (manifest.n, manifest.m);
        if a.cols() != n || a.rows() != m || tikhonov.shape() != [n, m] {
            return Err(contract(
                "ReconNet: operator / inversion dimensions disagree",
            ));
        }
        if manifest.kind == NetKind::Iterative && manifest.iterations == 0 {
            return Err(config("iterative net needs at least one iteration"));
        }
        let enhancer = UNetLite::new(manifest.conv.clone(), n)?;
        let mut rng = crate::rng::stream(manifest.init_seed, &[crate::rng::name_key("recon_net")]);
        let mut params = ParamSet::default();
        enhancer.init_params(&mut params, "enh.", &mut rng);
        match manifest.kind {
            NetKind::FullyLearned => params.push("inversion", vec![n, m], tikhonov.data().to_vec()),
            NetKind::Iterative => params.push(
                "dc_lambda",
                vec![manifest.iterations],
                vec![manifest.dc_init; manifest.iterations],
            ),
            NetKind::Postproc => {}
        }
        Ok(Self {
            manifest,
            a,
            tikhonov,
            enhancer,
            params,
        })
    }

    pub fn kind(&self) -> NetKind {
        self.manifest.kind
    }

    pub fn manifest(&self) -> &NetManifest {
        &self.manifest
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn operator(&self) -> &Arc<dyn LinearOperator> {
        &self.a
    }

    /// Records the forward pass; `p` are the parameter leaves from
    /// [`ParamSet::leaves`].
    pub fn record(&self, tape: &mut Tape, y: Var, p: &[Var]) -> Result<Var> {
        if tape.value(y).len() != self.manifest.m {
            return Err(contract(format!(
                "network expects {} measurements, got {}",
                self.manifest.m,
                tape.value(y).len()
            )));
        }
        let ne = self.enhancer.param_count();
        let (enh, extra) = p.split_at(ne);
        match self.manifest.kind {
            NetKind::Postproc => {
                let x0 = tape.matvec(&self.tikhonov, y)?;
                self.enhancer.record(tape, x0, enh)
            }
            NetKind::FullyLearned => {
                let x0 = tape.matvec_param(extra[0], y, self.manifest.n, self.manifest.m)?;
                self.enhancer.record(tape, x0, enh)
            }
            NetKind::Iterative => {
                let mut x = tape.matvec(&self.tikhonov, y)?;
                for k in 0..self.manifest.iterations {
                    x = self.enhancer.record(tape, x, enh)?;
                    let lam = tape.pick(extra[0], k)?;
                    x = dc_record(tape, x, y, &self.a, lam)?;
                }
                Ok(x)
            }
        }
    }

    /// Records the forward pass with the parameters as fresh leaves.
    pub fn record_input(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let p = self.params.leaves(tape)?;
        self.record(tape, y, &p)
    }

    /// Plain evaluation.
    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let yv = tape.leaf_tensor(y)?;
        let out = self.record_input(&mut tape, yv)?;
        Ok(Tensor::from_vec(tape.value(out).to_vec()))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::with_meta(serde_json::to_value(&self.manifest)?);
        c.push("tikhonov", (*self.tikhonov).clone());
        self.params.push_into(&mut c)?;
        Ok(c)
    }

    /// Restores a network saved with [`ReconNet::to_container`]; the operator
    /// is supplied by the caller.
    pub fn from_container(c: &Container, a: Arc<dyn LinearOperator>) -> Result<Self> {
        let manifest: NetManifest =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Validation {
                path: "manifest".into(),
                reason: e.to_string(),
            })?;
        if manifest.version != 1 {
            return Err(Error::Validation {
                path: "manifest.version".into(),
                reason: format!("unsupported version {}", manifest.version),
            });
        }
        let t = c.get("tikhonov").ok_or_else(|| Error::Validation {
            path: "tikhonov".into(),
            reason: "missing inversion matrix".into(),
        })?;
        let mut net = Self::from_manifest(manifest, a, Arc::new(t.clone()))?;
        net.params.pull_from(c)?;
        Ok(net)
    }
}
