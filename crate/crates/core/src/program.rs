//! Small serializable programs over the registered tape primitives.
//!
//! Slot 0 holds the input; each step appends one slot. The last slot must be
//! a scalar.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::operators::SpdFactor;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub op: String,
    #[serde(default)]
    pub inputs: Vec<usize>,
    /// Scale factor (`scale`) or threshold (`soft_threshold`).
    #[serde(default)]
    pub scalar: Option<f64>,
    /// Matrix for `matvec`, SPD system matrix for `solve`, or a constant
    /// for `const`.
    #[serde(default)]
    pub tensor: Option<Tensor>,
    /// `(cin, cout)` for `conv1d`.
    #[serde(default)]
    pub channels: Option<(usize, usize)>,
}

impl Step {
    pub fn new(op: &str, inputs: &[usize]) -> Self {
        Self {
            op: op.to_owned(),
            inputs: inputs.to_vec(),
            scalar: None,
            tensor: None,
            channels: None,
        }
    }

    pub fn with_scalar(mut self, s: f64) -> Self {
        self.scalar = Some(s);
        self
    }

    pub fn with_tensor(mut self, t: Tensor) -> Self {
        self.tensor = Some(t);
        self
    }

    pub fn with_channels(mut self, cin: usize, cout: usize) -> Self {
        self.channels = Some((cin, cout));
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Program {
    pub steps: Vec<Step>,
}

/// Names accepted in [`Step::op`].
pub const PRIMITIVES: &[&str] = &[
    "const",
    "add",
    "sub",
    "scale",
    "matvec",
    "conv1d",
    "relu",
    "soft_threshold",
    "squared_norm",
    "norm",
    "sum",
    "dot",
    "solve",
];

impl Program {
    pub fn new(steps: Vec<Step>) -> Self {
        Self { steps }
    }

    /// Records the program on `tape` with `input` in slot 0.
    pub fn record(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let mut slots = vec![input];
        for (k, step) in self.steps.iter().enumerate() {
            let arg = |i: usize| -> Result<Var> {
                let idx = *step
                    .inputs
                    .get(i)
                    .ok_or_else(|| contract(format!("step {k} (`{}`) needs input {i}", step.op)))?;
                slots
                    .get(idx)
                    .copied()
                    .ok_or_else(|| contract(format!("step {k} refers to missing slot {idx}")))
            };
            let scalar = || {
                step.scalar
                    .ok_or_else(|| contract(format!("step {k} (`{}`) needs `scalar`", step.op)))
            };
            let tensor = || {
                step.tensor
                    .as_ref()
                    .ok_or_else(|| contract(format!("step {k} (`{}`) needs `tensor`", step.op)))
            };
            let v = match step.op.as_str() {
                "const" => tape.leaf_tensor(tensor()?)?,
                "add" => tape.add(arg(0)?, arg(1)?)?,
                "sub" => tape.sub(arg(0)?, arg(1)?)?,
                "scale" => tape.scale(arg(0)?, scalar()?)?,
                "matvec" => tape.matvec(&Arc::new(tensor()?.clone()), arg(0)?)?,
                "conv1d" => {
                    let (cin, cout) = step
                        .channels
                        .ok_or_else(|| contract(format!("step {k} (`conv1d`) needs `channels`")))?;
                    tape.conv1d(arg(0)?, arg(1)?, arg(2)?, cin, cout)?
                }
                "relu" => tape.relu(arg(0)?)?,
                "soft_threshold" => tape.soft_threshold(arg(0)?, scalar()?)?,
                "squared_norm" => tape.squared_norm(arg(0)?)?,
                "norm" => tape.norm(arg(0)?)?,
                "sum" => tape.sum(arg(0)?)?,
                "dot" => tape.dot(arg(0)?, arg(1)?)?,
                "solve" => {
                    let q = tensor()?;
                    let (n, _) = q.dims2()?;
                    let f = Arc::new(SpdFactor::new(q.data(), n)?);
                    tape.solve(&f, arg(0)?)?
                }
                other => return Err(Error::UnsupportedOperation(other.to_owned())),
            };
            slots.push(v);
        }
        Ok(*slots.last().expect("slot 0 always present"))
    }
}

/// Value of a scalar program at `input` and its reverse-mode gradient.
pub fn evaluate_and_gradient(program: &Program, input: &Tensor) -> Result<(f64, Tensor)> {
    if !input.is_finite() {
        return Err(contract("evaluate_and_gradient: input is not finite"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf_tensor(input)?;
    let out = program.record(&mut tape, x)?;
    if tape.value(out).len() != 1 {
        return Err(contract("program output is not a scalar"));
    }
    let grads = tape.backward(out)?;
    let g = Tensor::new(input.shape().to_vec(), grads.wrt(&tape, x))?;
    Ok((tape.scalar(out), g))
}
