use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{check_grid, CurveNoise};
use crate::attacks::AttackConfig;
use crate::error::{Error, Result};
use crate::nets::{ClassifierConfig, ConvBlockSpec, NetKind, TrainConfig, DEFAULT_ITERATIONS};
use crate::signals::PiecewiseConstantSpec;
use crate::tv::AdmmConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Parses a JSON document, reporting the field path of the first error.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Validation {
        path: e.path().to_string(),
        reason: e.inner().to_string(),
    })
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Validation {
        path: path.into(),
        reason: reason.into(),
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != CONFIG_VERSION {
        return Err(invalid(
            "version",
            format!("unsupported version {v}, expected {CONFIG_VERSION}"),
        ));
    }
    Ok(())
}

fn check_eta_grid(grid: &[f64]) -> Result<()> {
    check_grid(grid).map_err(|e| invalid("eta_grid", e.to_string()))
}

/// Measurement model and data for a 1-D piecewise-constant scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub signal: PiecewiseConstantSpec,
    pub m: usize,
    pub operator_seed: u64,
    pub tikhonov_alpha: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "a1".into(),
            signal: PiecewiseConstantSpec::default(),
            m: 100,
            operator_seed: 0,
            tikhonov_alpha: 0.05,
            n_train: 2000,
            n_test: 20,
            data_seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains([',', '"', '\n']) {
            return Err(invalid(
                "scenario.name",
                "must be non-empty without commas, quotes or newlines",
            ));
        }
        self.signal
            .validate()
            .map_err(|e| invalid("scenario.signal", e.to_string()))?;
        if self.m == 0 {
            return Err(invalid("scenario.m", "must be >= 1"));
        }
        if !(self.tikhonov_alpha > 0.0) {
            return Err(invalid("scenario.tikhonov_alpha", "must be > 0"));
        }
        if self.n_test == 0 {
            return Err(invalid("scenario.n_test", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodConfig {
    /// Constrained TV with the ball radius set to the noise level.
    Tv {
        name: String,
    },
    TvUnconstrained {
        name: String,
        lambda: f64,
    },
    Tikhonov {
        name: String,
    },
    Net {
        name: String,
        net: NetKind,
        conv: ConvBlockSpec,
        #[serde(default = "default_iterations")]
        iterations: usize,
        #[serde(default)]
        train: TrainConfig,
        /// Load trained weights instead of training.
        #[serde(default)]
        weights: Option<PathBuf>,
    },
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

impl MethodConfig {
    pub fn name(&self) -> &str {
        match self {
            MethodConfig::Tv { name }
            | MethodConfig::TvUnconstrained { name, .. }
            | MethodConfig::Tikhonov { name }
            | MethodConfig::Net { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub admm: AdmmConfig,
    pub methods: Vec<MethodConfig>,
    /// Relative noise levels `η / ‖A x̄‖`, strictly increasing.
    pub eta_grid: Vec<f64>,
    pub noise_kinds: Vec<CurveNoise>,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub attack: AttackConfig,
    /// `(from, to)` method pairs: attacks on `from` are evaluated on `to`.
    #[serde(default)]
    pub transfer: Vec<(String, String)>,
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
}

fn default_draws() -> usize {
    50
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        self.scenario.validate()?;
        self.admm
            .validate()
            .map_err(|e| invalid("admm", e.to_string()))?;
        if self.methods.is_empty() {
            return Err(invalid("methods", "at least one method is required"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            let path = format!("methods[{i}]");
            let name = m.name();
            if name.is_empty() || name.contains([',', '"', '\n']) || name.contains("->") {
                return Err(invalid(
                    format!("{path}.name"),
                    "must be non-empty without commas, quotes, newlines or `->`",
                ));
            }
            if self.methods[..i].iter().any(|o| o.name() == name) {
                return Err(invalid(
                    format!("{path}.name"),
                    format!("duplicate method name `{name}`"),
                ));
            }
            match m {
                MethodConfig::TvUnconstrained { lambda, .. } if !(*lambda > 0.0) => {
                    return Err(invalid(format!("{path}.lambda"), "must be > 0"));
                }
                MethodConfig::Net { train, weights, .. } => {
                    train
                        .validate()
                        .map_err(|e| invalid(format!("{path}.train"), e.to_string()))?;
                    if weights.is_none() && self.scenario.n_train == 0 {
                        return Err(invalid(
                            "scenario.n_train",
                            format!("method `{name}` needs training data"),
                        ));
                    }
                }
                _ => {}
            }
        }
        check_eta_grid(&self.eta_grid)?;
        if self.noise_kinds.is_empty() {
            return Err(invalid(
                "noise_kinds",
                "at least one noise kind is required",
            ));
        }
        for (i, k) in self.noise_kinds.iter().enumerate() {
            if let CurveNoise::Bernoulli { p } = k {
                if !(*p > 0.0 && *p < 1.0) {
                    return Err(invalid(
                        format!("noise_kinds[{i}].bernoulli.p"),
                        "must lie in (0, 1)",
                    ));
                }
            }
        }
        if self.draws == 0 {
            return Err(invalid("draws", "must be >= 1"));
        }
        let attack = AttackConfig {
            eta: 0.0,
            ..self.attack.clone()
        };
        attack
            .validate()
            .map_err(|e| invalid("attack", e.to_string()))?;
        for (i, (from, to)) in self.transfer.iter().enumerate() {
            for (side, name) in [("0", from), ("1", to)] {
                if !self.methods.iter().any(|m| m.name() == name) {
                    return Err(invalid(
                        format!("transfer[{i}][{side}]"),
                        format!("unknown method `{name}`"),
                    ));
                }
            }
        }
        if !self.transfer.is_empty() && !self.noise_kinds.contains(&CurveNoise::Adversarial) {
            return Err(invalid(
                "transfer",
                "transfer pairs need the adversarial noise kind",
            ));
        }
        Ok(())
    }
}

/// Two iterative nets trained identically except for the jitter bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub version: u32,
    pub scenario: ScenarioConfig,
    pub conv: ConvBlockSpec,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Shared training settings; its `jitter_bound` is ignored.
    pub train: TrainConfig,
    /// Jitter bound of the jittered net, relative to the mean `‖A x‖` of
    /// the training set.
    pub rel_jitter: f64,
    pub eta_grid: Vec<f64>,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
}

impl AblationConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        self.scenario.validate()?;
        if self.scenario.n_train == 0 {
            return Err(invalid("scenario.n_train", "must be >= 1"));
        }
        self.train
            .validate()
            .map_err(|e| invalid("train", e.to_string()))?;
        if !(self.rel_jitter > 0.0) {
            return Err(invalid("rel_jitter", "must be > 0"));
        }
        check_eta_grid(&self.eta_grid)?;
        AttackConfig {
            eta: 0.0,
            ..self.attack.clone()
        }
        .validate()
        .map_err(|e| invalid("attack", e.to_string()))
    }
}

/// Jump-parity classification from reconstructions by unconstrained TV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub version: u32,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub admm: AdmmConfig,
    pub lambda: f64,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    pub eta_grid: Vec<f64>,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
}

impl ClassifyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        self.scenario.validate()?;
        if self.scenario.n_train == 0 {
            return Err(invalid("scenario.n_train", "must be >= 1"));
        }
        self.admm
            .validate()
            .map_err(|e| invalid("admm", e.to_string()))?;
        if !(self.lambda > 0.0) {
            return Err(invalid("lambda", "must be > 0"));
        }
        if self.classifier.classes != 2 {
            return Err(invalid("classifier.classes", "jump parity has two classes"));
        }
        check_eta_grid(&self.eta_grid)?;
        AttackConfig {
            eta: 0.0,
            ..self.attack.clone()
        }
        .validate()
        .map_err(|e| invalid("attack", e.to_string()))
    }
}
