//! Reverse-mode differentiation over vector-valued primitives.
//!
//! A [`Tape`] records every primitive in execution order, so node inputs
//! always precede the node itself. [`Tape::backward`] walks the nodes once,
//! in reverse, accumulating adjoints.

use std::sync::Arc;

use crate::error::{contract, Error, Result};
use crate::operators::{LinearOperator, SpdFactor};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MulScalar {
        x: Var,
        s: Var,
    },
    MatVec {
        m: Arc<Tensor>,
        x: Var,
    },
    MatVecT {
        m: Arc<Tensor>,
        x: Var,
    },
    MatVecParam {
        m: Var,
        x: Var,
        cols: usize,
    },
    Apply {
        op: Arc<dyn LinearOperator>,
        x: Var,
    },
    Adjoint {
        op: Arc<dyn LinearOperator>,
        x: Var,
    },
    Solve {
        factor: Arc<SpdFactor>,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        cin: usize,
        cout: usize,
        len: usize,
    },
    Relu(Var),
    SoftThreshold(Var, f64),
    ProjectBall {
        p: Var,
        c: Var,
        radius: f64,
    },
    SquaredNorm(Var),
    Norm(Var),
    Sum(Var),
    Dot(Var, Var),
    Pick(Var, usize),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
    },
    Concat(Var, Var),
    ChannelSum {
        x: Var,
        len: usize,
    },
    LogSoftmax(Var),
    Softmax(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::MulScalar { .. } => "mul_scalar",
            Op::MatVec { .. } => "matvec",
            Op::MatVecT { .. } => "matvec_t",
            Op::MatVecParam { .. } => "matvec_param",
            Op::Apply { .. } => "apply",
            Op::Adjoint { .. } => "adjoint",
            Op::Solve { .. } => "solve",
            Op::Conv1d { .. } => "conv1d",
            Op::Relu(..) => "relu",
            Op::SoftThreshold(..) => "soft_threshold",
            Op::ProjectBall { .. } => "project_ball",
            Op::SquaredNorm(..) => "squared_norm",
            Op::Norm(..) => "norm",
            Op::Sum(..) => "sum",
            Op::Dot(..) => "dot",
            Op::Pick(..) => "pick",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Upsample2 { .. } => "upsample2",
            Op::Concat(..) => "concat",
            Op::ChannelSum { .. } => "channel_sum",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Softmax(..) => "softmax",
        }
    }
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Single-owner recording of a differentiable computation.
pub struct Tape {
    nodes: Vec<Node>,
    live: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            live: true,
        }
    }

    pub fn is_live(&self) -> bool {
        self.live
    }

    /// Stops (or resumes) recording. Every primitive on a stopped tape is a
    /// contract violation.
    pub fn set_live(&mut self, live: bool) {
        self.live = live;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Result<Var> {
        if !self.live {
            return Err(contract(format!(
                "tape is not live (recording `{}`)",
                op.name()
            )));
        }
        let idx = self.nodes.len();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: idx,
                op: op.name(),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(idx))
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.len_of(a) != self.len_of(b) {
            return Err(contract(format!(
                "{what}: lengths {} and {} differ",
                self.len_of(a),
                self.len_of(b)
            )));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.data().to_vec(), Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let v = tensor::add(self.value(a), self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        let v = tensor::sub(self.value(a), self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).iter().map(|a| a * c).collect();
        self.push(v, Op::Scale(x, c))
    }

    /// `s * x` with `s` a length-1 node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.len_of(s) != 1 {
            return Err(contract("mul_scalar: scalar node must have length 1"));
        }
        let c = self.scalar(s);
        let v = self.value(x).iter().map(|a| a * c).collect();
        self.push(v, Op::MulScalar { x, s })
    }

    /// `M x` for a constant matrix.
    pub fn matvec(&mut self, m: &Arc<Tensor>, x: Var) -> Result<Var> {
        let v = m.matvec(self.value(x))?;
        self.push(
            v,
            Op::MatVec {
                m: Arc::clone(m),
                x,
            },
        )
    }

    /// `Mᵀ x` for a constant matrix.
    pub fn matvec_t(&mut self, m: &Arc<Tensor>, x: Var) -> Result<Var> {
        let v = m.matvec_t(self.value(x))?;
        self.push(
            v,
            Op::MatVecT {
                m: Arc::clone(m),
                x,
            },
        )
    }

    /// `M x` where the row-major `rows x cols` matrix is itself a node.
    pub fn matvec_param(&mut self, m: Var, x: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.len_of(m) != rows * cols || self.len_of(x) != cols {
            return Err(contract(format!(
                "matvec_param: {rows}x{cols} with buffers {} and {}",
                self.len_of(m),
                self.len_of(x)
            )));
        }
        let mut v = vec![0.0; rows];
        tensor::matvec(self.value(m), rows, cols, self.value(x), &mut v);
        self.push(v, Op::MatVecParam { m, x, cols })
    }

    pub fn apply(&mut self, op: &Arc<dyn LinearOperator>, x: Var) -> Result<Var> {
        if self.len_of(x) != op.cols() {
            return Err(contract("apply: operator input length"));
        }
        let v = op.apply(self.value(x));
        self.push(
            v,
            Op::Apply {
                op: Arc::clone(op),
                x,
            },
        )
    }

    pub fn adjoint(&mut self, op: &Arc<dyn LinearOperator>, x: Var) -> Result<Var> {
        if self.len_of(x) != op.rows() {
            return Err(contract("adjoint: operator output length"));
        }
        let v = op.adjoint(self.value(x));
        self.push(
            v,
            Op::Adjoint {
                op: Arc::clone(op),
                x,
            },
        )
    }

    /// `Q⁻¹ b` through a stored SPD factorization.
    pub fn solve(&mut self, factor: &Arc<SpdFactor>, b: Var) -> Result<Var> {
        if self.len_of(b) != factor.dim() {
            return Err(contract("solve: right-hand side length"));
        }
        let v = factor.solve(self.value(b));
        self.push(
            v,
            Op::Solve {
                factor: Arc::clone(factor),
                b,
            },
        )
    }

    /// Zero-padded kernel-3 convolution of a `cin x len` input with a
    /// `cout x cin x 3` weight and `cout` bias.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, cin: usize, cout: usize) -> Result<Var> {
        let xl = self.len_of(x);
        if cin == 0 || xl % cin != 0 || self.len_of(w) != cout * cin * 3 || self.len_of(b) != cout {
            return Err(contract(format!(
                "conv1d: cin={cin} cout={cout} with input {xl}, weight {}, bias {}",
                self.len_of(w),
                self.len_of(b)
            )));
        }
        let len = xl / cin;
        let v = conv1d_forward(self.value(x), self.value(w), self.value(b), cin, cout, len);
        self.push(
            v,
            Op::Conv1d {
                x,
                w,
                b,
                cin,
                cout,
                len,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).iter().map(|&a| a.max(0.0)).collect();
        self.push(v, Op::Relu(x))
    }

    pub fn soft_threshold(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau >= 0.0) {
            return Err(contract(format!(
                "soft_threshold: tau must be >= 0, got {tau}"
            )));
        }
        let v = crate::prox::soft_threshold_slice(self.value(x), tau);
        self.push(v, Op::SoftThreshold(x, tau))
    }

    /// Euclidean projection of `p` onto the ball of `radius` around `c`.
    pub fn project_ball(&mut self, p: Var, c: Var, radius: f64) -> Result<Var> {
        self.same_len(p, c, "project_ball")?;
        if !(radius >= 0.0) {
            return Err(contract(format!(
                "project_ball: radius must be >= 0, got {radius}"
            )));
        }
        let v = crate::prox::project_ball_slice(self.value(p), self.value(c), radius);
        self.push(v, Op::ProjectBall { p, c, radius })
    }

    pub fn squared_norm(&mut self, x: Var) -> Result<Var> {
        let s = tensor::dot(self.value(x), self.value(x));
        self.push(vec![s], Op::SquaredNorm(x))
    }

    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let s = tensor::norm2(self.value(x));
        self.push(vec![s], Op::Norm(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![s], Op::Sum(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "dot")?;
        let s = tensor::dot(self.value(a), self.value(b));
        self.push(vec![s], Op::Dot(a, b))
    }

    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        if i >= self.len_of(x) {
            return Err(contract(format!("pick: index {i} out of range")));
        }
        let s = self.value(x)[i];
        self.push(vec![s], Op::Pick(x, i))
    }

    /// Max-pooling by 2 along the length of a `channels x len` node.
    pub fn max_pool2(&mut self, x: Var, channels: usize) -> Result<Var> {
        let xl = self.len_of(x);
        if channels == 0 || xl % channels != 0 || (xl / channels) % 2 != 0 {
            return Err(contract(format!(
                "max_pool2: length {xl} with {channels} channels"
            )));
        }
        let len = xl / channels;
        let half = len / 2;
        let xv = self.value(x);
        let mut v = Vec::with_capacity(channels * half);
        let mut argmax = Vec::with_capacity(channels * half);
        for c in 0..channels {
            for t in 0..half {
                let i = c * len + 2 * t;
                let j = if xv[i + 1] > xv[i] { i + 1 } else { i };
                v.push(xv[j]);
                argmax.push(j);
            }
        }
        self.push(v, Op::MaxPool2 { x, argmax })
    }

    /// Nearest-neighbour upsampling by 2 along the length.
    pub fn upsample2(&mut self, x: Var, channels: usize) -> Result<Var> {
        let xl = self.len_of(x);
        if channels == 0 || xl % channels != 0 {
            return Err(contract(format!(
                "upsample2: length {xl} with {channels} channels"
            )));
        }
        let v = self.value(x).iter().flat_map(|&a| [a, a]).collect();
        self.push(v, Op::Upsample2 { x })
    }

    /// Channel concatenation of two `c x len` nodes (flat append).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut v = self.value(a).to_vec();
        v.extend_from_slice(self.value(b));
        self.push(v, Op::Concat(a, b))
    }

    /// Sum over the length axis of a `channels x len` node.
    pub fn channel_sum(&mut self, x: Var, channels: usize) -> Result<Var> {
        let xl = self.len_of(x);
        if channels == 0 || xl % channels != 0 {
            return Err(contract(format!(
                "channel_sum: length {xl} with {channels} channels"
            )));
        }
        let len = xl / channels;
        let v = self
            .value(x)
            .chunks_exact(len)
            .map(|c| c.iter().sum())
            .collect();
        self.push(v, Op::ChannelSum { x, len })
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let lse = log_sum_exp(xv);
        let v = xv.iter().map(|a| a - lse).collect();
        self.push(v, Op::LogSoftmax(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = softmax(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(contract("backward: output must be a scalar node"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let (lower, slot) = grads.split_at_mut(i);
            self.propagate(&node.op, &node.value, &g, lower);
            slot[0] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let nodes = &self.nodes;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                tensor::axpy(1.0, g, acc(grads, nodes, *a));
                tensor::axpy(1.0, g, acc(grads, nodes, *b));
            }
            Op::Sub(a, b) => {
                tensor::axpy(1.0, g, acc(grads, nodes, *a));
                tensor::axpy(-1.0, g, acc(grads, nodes, *b));
            }
            Op::Scale(x, c) => tensor::axpy(*c, g, acc(grads, nodes, *x)),
            Op::MulScalar { x, s } => {
                let c = val(*s)[0];
                let d = tensor::dot(g, val(*x));
                tensor::axpy(c, g, acc(grads, nodes, *x));
                acc(grads, nodes, *s)[0] += d;
            }
            Op::MatVec { m, x } => {
                let gx = m.matvec_t(g).expect("shape checked on record");
                tensor::axpy(1.0, &gx, acc(grads, nodes, *x));
            }
            Op::MatVecT { m, x } => {
                let gx = m.matvec(g).expect("shape checked on record");
                tensor::axpy(1.0, &gx, acc(grads, nodes, *x));
            }
            Op::MatVecParam { m, x, cols } => {
                let cols = *cols;
                let xv = val(*x);
                let mv = val(*m);
                let gm = acc(grads, nodes, *m);
                for (r, &gi) in g.iter().enumerate() {
                    if gi != 0.0 {
                        tensor::axpy(gi, xv, &mut gm[r * cols..(r + 1) * cols]);
                    }
                }
                let mut gx = vec![0.0; cols];
                tensor::matvec_t(mv, g.len(), cols, g, &mut gx);
                tensor::axpy(1.0, &gx, acc(grads, nodes, *x));
            }
            Op::Apply { op, x } => {
                let gx = op.adjoint(g);
                tensor::axpy(1.0, &gx, acc(grads, nodes, *x));
            }
            Op::Adjoint { op, x } => {
                let gx = op.apply(g);
                tensor::axpy(1.0, &gx, acc(grads, nodes, *x));
            }
            Op::Solve { factor, b } => {
                let gb = factor.solve(g);
                tensor::axpy(1.0, &gb, acc(grads, nodes, *b));
            }
            Op::Conv1d {
                x,
                w,
                b,
                cin,
                cout,
                len,
            } => {
                let (cin, cout, len) = (*cin, *cout, *len);
                let xv = val(*x);
                let wv = val(*w);
                {
                    let gb = acc(grads, nodes, *b);
                    for co in 0..cout {
                        gb[co] += g[co * len..(co + 1) * len].iter().sum::<f64>();
                    }
                }
                {
                    let gw = acc(grads, nodes, *w);
                    for co in 0..cout {
                        let gc = &g[co * len..(co + 1) * len];
                        for ci in 0..cin {
                            let xc = &xv[ci * len..(ci + 1) * len];
                            let base = (co * cin + ci) * 3;
                            // tap k reads x[t + k - 1]
                            gw[base] += tensor::dot(&gc[1..], &xc[..len - 1]);
                            gw[base + 1] += tensor::dot(gc, xc);
                            gw[base + 2] += tensor::dot(&gc[..len - 1], &xc[1..]);
                        }
                    }
                }
                let gx = acc(grads, nodes, *x);
                for co in 0..cout {
                    let gc = &g[co * len..(co + 1) * len];
                    for ci in 0..cin {
                        let base = (co * cin + ci) * 3;
                        let (w0, w1, w2) = (wv[base], wv[base + 1], wv[base + 2]);
                        let gxc = &mut gx[ci * len..(ci + 1) * len];
                        for t in 0..len {
                            gxc[t] += w1 * gc[t];
                        }
                        for t in 1..len {
                            gxc[t - 1] += w0 * gc[t];
                        }
                        for t in 0..len - 1 {
                            gxc[t + 1] += w2 * gc[t];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let gx = acc(grads, nodes, *x);
                for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::SoftThreshold(x, tau) => {
                let xv = val(*x);
                let gx = acc(grads, nodes, *x);
                for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    if xi.abs() > *tau {
                        *o += gi;
                    }
                }
            }
            Op::ProjectBall { p, c, radius } => {
                let d = tensor::sub(val(*p), val(*c));
                let n = tensor::norm2(&d);
                if *radius == 0.0 {
                    tensor::axpy(1.0, g, acc(grads, nodes, *c));
                } else if n <= *radius {
                    tensor::axpy(1.0, g, acc(grads, nodes, *p));
                } else {
                    let dhat: Vec<f64> = d.iter().map(|v| v / n).collect();
                    let proj = tensor::dot(&dhat, g);
                    let s = radius / n;
                    let jg: Vec<f64> = g
                        .iter()
                        .zip(&dhat)
                        .map(|(gi, di)| s * (gi - di * proj))
                        .collect();
                    tensor::axpy(1.0, &jg, acc(grads, nodes, *p));
                    let gc = acc(grads, nodes, *c);
                    for ((o, gi), ji) in gc.iter_mut().zip(g).zip(&jg) {
                        *o += gi - ji;
                    }
                }
            }
            Op::SquaredNorm(x) => {
                let xv = val(*x);
                tensor::axpy(2.0 * g[0], xv, acc(grads, nodes, *x));
            }
            Op::Norm(x) => {
                let n = out[0];
                if n > 0.0 {
                    let xv = val(*x);
                    tensor::axpy(g[0] / n, xv, acc(grads, nodes, *x));
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(grads, nodes, *x).iter_mut().for_each(|o| *o += g0);
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                tensor::axpy(g[0], bv, acc(grads, nodes, *a));
                tensor::axpy(g[0], av, acc(grads, nodes, *b));
            }
            Op::Pick(x, i) => acc(grads, nodes, *x)[*i] += g[0],
            Op::MaxPool2 { x, argmax } => {
                let gx = acc(grads, nodes, *x);
                for (&j, &gi) in argmax.iter().zip(g) {
                    gx[j] += gi;
                }
            }
            Op::Upsample2 { x, .. } => {
                let gx = acc(grads, nodes, *x);
                for (o, pair) in gx.iter_mut().zip(g.chunks_exact(2)) {
                    *o += pair[0] + pair[1];
                }
            }
            Op::Concat(a, b) => {
                let na = self.nodes[a.0].value.len();
                tensor::axpy(1.0, &g[..na], acc(grads, nodes, *a));
                tensor::axpy(1.0, &g[na..], acc(grads, nodes, *b));
            }
            Op::ChannelSum { x, len, .. } => {
                let len = *len;
                let gx = acc(grads, nodes, *x);
                for (chunk, &gc) in gx.chunks_exact_mut(len).zip(g) {
                    chunk.iter_mut().for_each(|o| *o += gc);
                }
            }
            Op::LogSoftmax(x) => {
                let total: f64 = g.iter().sum();
                let gx = acc(grads, nodes, *x);
                for ((o, gi), lo) in gx.iter_mut().zip(g).zip(out) {
                    *o += gi - lo.exp() * total;
                }
            }
            Op::Softmax(x) => {
                let sg = tensor::dot(out, g);
                let gx = acc(grads, nodes, *x);
                for ((o, gi), si) in gx.iter_mut().zip(g).zip(out) {
                    *o += si * (gi - sg);
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` does not influence the
    /// output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zero-filled when there is no path.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    len: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; cout * len];
    for co in 0..cout {
        let oc = &mut out[co * len..(co + 1) * len];
        oc.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..cin {
            let xc = &x[ci * len..(ci + 1) * len];
            let base = (co * cin + ci) * 3;
            let (w0, w1, w2) = (w[base], w[base + 1], w[base + 2]);
            for t in 0..len {
                oc[t] += w1 * xc[t];
            }
            for t in 1..len {
                oc[t] += w0 * xc[t - 1];
            }
            for t in 0..len - 1 {
                oc[t] += w2 * xc[t + 1];
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Checks the gradient of `f` at `x` against central differences.
    fn check(x0: &[f64], f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.to_vec()).unwrap();
        let y = f(&mut tape, x).unwrap();
        let g = tape.backward(y).unwrap().wrt(&tape, x);

        let eval = |xs: Vec<f64>| {
            let mut t = Tape::new();
            let x = t.leaf(xs).unwrap();
            let y = f(&mut t, x).unwrap();
            t.scalar(y)
        };
        let h = 1e-5;
        let fd: Vec<f64> = (0..x0.len())
            .map(|i| {
                let mut p = x0.to_vec();
                let mut m = x0.to_vec();
                p[i] += h;
                m[i] -= h;
                (eval(p) - eval(m)) / (2.0 * h)
            })
            .collect();
        let diff = tensor::norm2(&tensor::sub(&g, &fd));
        diff / tensor::norm2(&fd).max(1e-12)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn quadratic_and_relu_examples() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0]).unwrap();
        let y = t.squared_norm(x).unwrap();
        assert_eq!(t.scalar(y), 5.0);
        assert_eq!(t.backward(y).unwrap().wrt(&t, x), vec![2.0, 4.0]);

        let mut t = Tape::new();
        let x = t.leaf(vec![-1.0, 3.0]).unwrap();
        let r = t.relu(x).unwrap();
        let y = t.sum(r).unwrap();
        assert_eq!(t.scalar(y), 3.0);
        assert_eq!(t.backward(y).unwrap().wrt(&t, x), vec![0.0, 1.0]);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = Arc::new(Tensor::new(vec![4, 6], rand_vec(&mut rng, 24)).unwrap());
        let w = rand_vec(&mut rng, 2 * 2 * 3);
        let bias = rand_vec(&mut rng, 2);
        let q: Vec<f64> = {
            let a = rand_vec(&mut rng, 36);
            let mut q = crate::operators::gram(&Tensor::new(vec![6, 6], a).unwrap());
            for i in 0..6 {
                q[i * 6 + i] += 1.0;
            }
            q
        };
        let factor = Arc::new(SpdFactor::new(&q, 6).unwrap());
        let grad_op: Arc<dyn LinearOperator> =
            Arc::new(crate::operators::GradientOp1D::new(6).unwrap());
        let c = rand_vec(&mut rng, 6);

        for _ in 0..10 {
            let x0 = rand_vec(&mut rng, 6);
            let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
                (
                    "add",
                    Box::new(|t, x| {
                        let y = t.add(x, x)?;
                        t.squared_norm(y)
                    }),
                ),
                (
                    "sub",
                    Box::new(|t, x| {
                        let k = t.leaf(vec![0.3; 6])?;
                        let y = t.sub(x, k)?;
                        t.squared_norm(y)
                    }),
                ),
                (
                    "scale",
                    Box::new(|t, x| {
                        let y = t.scale(x, -1.7)?;
                        t.sum(y)
                    }),
                ),
                (
                    "mul_scalar",
                    Box::new(|t, x| {
                        let s = t.pick(x, 2)?;
                        let y = t.mul_scalar(x, s)?;
                        t.squared_norm(y)
                    }),
                ),
                (
                    "matvec",
                    Box::new(|t, x| {
                        let y = t.matvec(&m, x)?;
                        t.squared_norm(y)
                    }),
                ),
                (
                    "matvec_t",
                    Box::new(|t, x| {
                        let y = t.matvec(&m, x)?;
                        let z = t.matvec_t(&m, y)?;
                        t.norm(z)
                    }),
                ),
                (
                    "matvec_param",
                    Box::new(|t, x| {
                        let mm = t.leaf(m.data().to_vec())?;
                        let z = t.scale(x, 2.0)?;
                        let y = t.matvec_param(mm, z, 4, 6)?;
                        let p = t.pick(y, 0)?;
                        let s = t.mul_scalar(y, p)?;
                        t.sum(s)
                    }),
                ),
                (
                    "matvec_param_w",
                    Box::new(|t, x| {
                        let v = t.leaf(vec![0.5, -1.0, 2.0])?;
                        let y = t.matvec_param(x, v, 2, 3)?;
                        t.squared_norm(y)
                    }),
                ),
                (
                    "apply",
                    Box::new(|t, x| {
                        let y = t.apply(&grad_op, x)?;
                        let z = t.adjoint(&grad_op, y)?;
                        t.squared_norm(z)
                    }),
                ),
                (
                    "solve",
                    Box::new(|t, x| {
                        let y = t.solve(&factor, x)?;
                        t.squared_norm(y)
                    }),
                ),
                (
                    "conv1d_x",
                    Box::new(|t, x| {
                        let wv = t.leaf(w.clone())?;
                        let bv = t.leaf(bias.clone())?;
                        let y = t.conv1d(x, wv, bv, 2, 2)?;
                        t.squared_norm(y)
                    }),
                ),
                (
                    "conv1d_w",
                    Box::new(|t, x| {
                        let xin = t.leaf(vec![0.1, -0.4, 0.9, 0.3, -0.2, 0.5])?;
                        let bv = t.leaf(vec![0.2, -0.1])?;
                        let wv = t.concat(x, x)?;
                        let wv = t.concat(wv, x)?;
                        let y = t.conv1d(xin, wv, bv, 3, 2)?;
                        t.squared_norm(y)
                    }),
                ),
                (
                    "relu",
                    Box::new(|t, x| {
                        let y = t.relu(x)?;
                        t.squared_norm(y)
                    }),
                ),
                (
                    "soft_threshold",
                    Box::new(|t, x| {
                        let y = t.soft_threshold(x, 0.2)?;
                        t.squared_norm(y)
                    }),
                ),
                (
                    "project_ball",
                    Box::new(|t, x| {
                        let cv = t.leaf(c.clone())?;
                        let s = t.scale(x, 3.0)?;
                        let y = t.project_ball(s, cv, 0.5)?;
                        let z = t.sub(y, x)?;
                        t.squared_norm(z)
                    }),
                ),
                (
                    "project_center",
                    Box::new(|t, x| {
                        let p = t.leaf(c.iter().map(|v| 4.0 * v).collect())?;
                        let y = t.project_ball(p, x, 0.7)?;
                        let k = t.leaf(vec![0.1; 6])?;
                        t.dot(y, k)
                    }),
                ),
                ("norm", Box::new(|t, x| t.norm(x))),
                (
                    "dot",
                    Box::new(|t, x| {
                        let y = t.relu(x)?;
                        t.dot(x, y)
                    }),
                ),
                (
                    "max_pool2",
                    Box::new(|t, x| {
                        let y = t.max_pool2(x, 3)?;
                        t.squared_norm(y)
                    }),
                ),
                (
                    "upsample2",
                    Box::new(|t, x| {
                        let y = t.upsample2(x, 2)?;
                        let k = t.leaf((0..12).map(|i| i as f64).collect())?;
                        t.dot(y, k)
                    }),
                ),
                (
                    "channel_sum",
                    Box::new(|t, x| {
                        let y = t.channel_sum(x, 2)?;
                        t.squared_norm(y)
                    }),
                ),
                (
                    "log_softmax",
                    Box::new(|t, x| {
                        let y = t.log_softmax(x)?;
                        t.pick(y, 1)
                    }),
                ),
                (
                    "softmax",
                    Box::new(|t, x| {
                        let y = t.softmax(x)?;
                        let k = t.leaf(vec![1., -2., 0.5, 3., 0., 1.])?;
                        t.dot(y, k)
                    }),
                ),
            ];
            for (name, f) in &cases {
                let err = check(&x0, f);
                assert!(err <= 1e-6, "{name}: relative error {err}");
            }
        }
    }

    #[test]
    fn non_finite_values_name_the_node() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1e300]).unwrap();
        let err = t.scale(x, 1e300).unwrap_err();
        assert!(
            matches!(
                err,
                Error::NonFinite {
                    node: 1,
                    op: "scale"
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn stopped_tape_refuses_to_record() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0]).unwrap();
        t.set_live(false);
        assert!(matches!(t.relu(x), Err(Error::Contract(_))));
    }
}
