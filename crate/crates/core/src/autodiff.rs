//! Reverse-mode differentiation over tensor operations.
//!
//! A [`Tape`] records every operation in execution order, so node inputs
//! always precede the node itself. [`Tape::backward`] walks the tape once in
//! reverse. Stochastic masks enter the tape as constants inside
//! [`Gate::Mask`] terms; backward never resamples them.
//!
//! [`finite_diff_grad`] is the central-difference oracle used to check the
//! hand-written backward rules.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, Gate, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Identifier of a trainable parameter, stable across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// How a batch-norm node normalizes its input.
#[derive(Clone, Debug)]
pub enum Normalization {
    /// Statistics of the current batch; gradients flow through them.
    Batch { eps: f64 },
    /// Fixed per-channel statistics (running estimates).
    Fixed {
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
}

/// Per-channel moments of a batch-norm input, biased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    AddBias {
        input: usize,
        bias: usize,
    },
    AvgPool {
        input: usize,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool(usize),
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MatMul(usize, usize),
    Sum(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor,
    },
    GatedSum(Vec<(usize, Gate)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Recorded computation. Single-threaded; independent tapes may live on
/// different threads.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::UnknownNode(v.index));
        }
        Ok(v.index)
    }

    fn needs(&self, indices: &[usize]) -> bool {
        indices.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, Some(id))
    }

    /// Differentiable leaf that is not a parameter (e.g. an input under test).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, None)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.idx(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[a].value.add(&self.nodes[b].value)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs, None))
    }

    /// Element-wise product; either side may be scalar-shaped.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[a].value.elementwise_mul(&self.nodes[b].value)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs, None))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let value = self.nodes[a].value.scale(s);
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Scale(a, s), needs, None))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let value = self.nodes[a].value.relu();
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Relu(a), needs, None))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (input, kernel) = (self.idx(input)?, self.idx(kernel)?);
        let value = tensor::conv2d(
            &self.nodes[input].value,
            &self.nodes[kernel].value,
            stride,
            pad,
        )?;
        let needs = self.needs(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            needs,
            None,
        ))
    }

    /// Adds a per-channel bias (length = dimension 1) to a rank-2 or rank-4 input.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (input, bias) = (self.idx(input)?, self.idx(bias)?);
        let x = &self.nodes[input].value;
        let b = &self.nodes[bias].value;
        let (channels, plane) = channel_layout(x.shape())?;
        if b.len() != channels {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[(i / plane) % channels];
        }
        let needs = self.needs(&[input, bias]);
        Ok(self.push(out, Op::AddBias { input, bias }, needs, None))
    }

    pub fn avg_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let input = self.idx(input)?;
        let value = tensor::avg_pool2d(&self.nodes[input].value, k, stride)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::AvgPool { input, k, stride }, needs, None))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let input = self.idx(input)?;
        let value = tensor::global_avg_pool(&self.nodes[input].value)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), needs, None))
    }

    /// Per-channel batch normalization followed by the affine `gamma, beta`.
    ///
    /// Also returns the observed moments of `input`, whatever the
    /// normalization mode.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        norm: Normalization,
    ) -> Result<(Var, ChannelStats)> {
        let (input, gamma, beta) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let x = &self.nodes[input].value;
        let (channels, plane) = channel_layout(x.shape())?;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        if g.len() != channels || b.len() != channels {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: x.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let observed = channel_stats(x, channels, plane);
        let (mean, inv_std, batch_stats) = match &norm {
            Normalization::Batch { eps } => (
                observed.mean.clone(),
                observed
                    .var
                    .iter()
                    .map(|v| 1.0 / (v + eps).sqrt())
                    .collect::<Vec<_>>(),
                true,
            ),
            Normalization::Fixed { mean, var, eps } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        left: x.shape().to_vec(),
                        right: vec![mean.len()],
                    });
                }
                (
                    mean.clone(),
                    var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
                    false,
                )
            }
        };
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / plane) % channels;
            *v = (*v - mean[c]) * inv_std[c] * g.data()[c] + b.data()[c];
        }
        let needs = self.needs(&[input, gamma, beta]);
        let var = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            needs,
            None,
        );
        Ok((var, observed))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), needs, None))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let value = Tensor::scalar(self.nodes[a].value.sum());
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Sum(a), needs, None))
    }

    /// Mean softmax cross-entropy of `(batch, classes)` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.idx(logits)?;
        let (loss, probs) = tensor::softmax_cross_entropy(&self.nodes[logits].value, labels)?;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
            None,
        ))
    }

    /// `sum_t gate_t * term_t`; mask gates are constants.
    pub fn gated_sum(&mut self, terms: Vec<(Var, Gate)>) -> Result<Var> {
        let mut resolved = Vec::with_capacity(terms.len());
        for (v, g) in terms {
            resolved.push((self.idx(v)?, g));
        }
        let value = {
            let refs: Vec<(&Tensor, &Gate)> = resolved
                .iter()
                .map(|(i, g)| (&self.nodes[*i].value, g))
                .collect();
            tensor::gated_sum(&refs)?
        };
        let inputs: Vec<usize> = resolved.iter().map(|(i, _)| *i).collect();
        let needs = self.needs(&inputs);
        Ok(self.push(value, Op::GatedSum(resolved), needs, None))
    }

    /// Gradients of a scalar `loss` with respect to every node that needs one.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let loss = self.idx(loss)?;
        let lv = &self.nodes[loss].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            params: self.nodes.iter().map(|n| n.param).collect(),
        })
    }

    /// Gradient of a scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        Ok(self.gradients(loss)?.into_param_map(self))
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |j: usize, gj: Tensor| -> Result<()> {
            if !self.nodes[j].needs_grad {
                return Ok(());
            }
            match &mut grads[j] {
                Some(acc) => acc.add_assign(&gj),
                slot @ None => {
                    *slot = Some(gj);
                    Ok(())
                }
            }
        };
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.nodes[this].needs_grad {
                        continue;
                    }
                    let full = g.elementwise_mul(val(other))?;
                    let gj = if val(this).shape() == full.shape() {
                        full
                    } else {
                        // scalar operand: reduce the broadcast
                        Tensor::full(val(this).shape(), full.sum())
                    };
                    send(this, gj)?;
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s))?,
            Op::Relu(a) => {
                let gx = g.zip_map(
                    val(*a),
                    "relu_backward",
                    |gv, x| if x > 0.0 { gv } else { 0.0 },
                )?;
                send(*a, gx)?;
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                if self.nodes[*input].needs_grad {
                    send(
                        *input,
                        tensor::conv2d_backward_input(
                            g,
                            val(*input).shape(),
                            val(*kernel),
                            *stride,
                            *pad,
                        )?,
                    )?;
                }
                if self.nodes[*kernel].needs_grad {
                    send(
                        *kernel,
                        tensor::conv2d_backward_kernel(
                            g,
                            val(*input),
                            val(*kernel).shape(),
                            *stride,
                            *pad,
                        )?,
                    )?;
                }
            }
            Op::AddBias { input, bias } => {
                send(*input, g.clone())?;
                if self.nodes[*bias].needs_grad {
                    let (channels, plane) = channel_layout(g.shape())?;
                    let mut gb = vec![0.0; channels];
                    for (k, &v) in g.data().iter().enumerate() {
                        gb[(k / plane) % channels] += v;
                    }
                    send(*bias, Tensor::new(val(*bias).shape(), gb)?)?;
                }
            }
            Op::AvgPool { input, k, stride } => {
                send(
                    *input,
                    tensor::avg_pool2d_backward(g, val(*input).shape(), *k, *stride)?,
                )?;
            }
            Op::GlobalAvgPool(input) => {
                send(
                    *input,
                    tensor::global_avg_pool_backward(g, val(*input).shape())?,
                )?;
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let x = val(*input);
                let gam = val(*gamma).data();
                let (channels, plane) = channel_layout(x.shape())?;
                let count = (x.len() / channels) as f64;
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for (k, (&gv, &xv)) in g.data().iter().zip(x.data()).enumerate() {
                    let c = (k / plane) % channels;
                    sum_g[c] += gv;
                    sum_gx[c] += gv * (xv - mean[c]) * inv_std[c];
                }
                let mut dx = Tensor::zeros(x.shape());
                for (k, d) in dx.data_mut().iter_mut().enumerate() {
                    let c = (k / plane) % channels;
                    let gv = g.data()[k];
                    *d = if *batch_stats {
                        let xhat = (x.data()[k] - mean[c]) * inv_std[c];
                        gam[c] * inv_std[c] / count * (count * gv - sum_g[c] - xhat * sum_gx[c])
                    } else {
                        gv * gam[c] * inv_std[c]
                    };
                }
                send(*input, dx)?;
                send(*gamma, Tensor::new(val(*gamma).shape(), sum_gx)?)?;
                send(*beta, Tensor::new(val(*beta).shape(), sum_g)?)?;
            }
            Op::MatMul(a, b) => {
                if self.nodes[*a].needs_grad {
                    send(*a, g.matmul(&val(*b).transpose2()?)?)?;
                }
                if self.nodes[*b].needs_grad {
                    send(*b, val(*a).transpose2()?.matmul(g)?)?;
                }
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                send(*a, Tensor::full(val(*a).shape(), s))?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.data()[0] / labels.len() as f64;
                let cols = probs.shape()[1];
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d.data_mut()[r * cols + l] -= 1.0;
                }
                send(*logits, d.scale(scale))?;
            }
            Op::GatedSum(terms) => {
                for (j, gate) in terms {
                    if self.nodes[*j].needs_grad {
                        send(*j, tensor::gated_term_grad(g, gate))?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `(channels, spatial plane size)` for rank-2 `(B, C)` or rank-4 `(B, C, H, W)`.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [_, c] => Ok((c, 1)),
        [_, c, h, w] => Ok((c, h * w)),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected (B, C) or (B, C, H, W)".into(),
        }),
    }
}

fn channel_stats(x: &Tensor, channels: usize, plane: usize) -> ChannelStats {
    let count = (x.len() / channels) as f64;
    let mut mean = vec![0.0; channels];
    for (k, &v) in x.data().iter().enumerate() {
        mean[(k / plane) % channels] += v;
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0; channels];
    for (k, &v) in x.data().iter().enumerate() {
        let c = (k / plane) % channels;
        var[c] += (v - mean[c]) * (v - mean[c]);
    }
    for v in &mut var {
        *v /= count;
    }
    ChannelStats { mean, var }
}

/// Per-node gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<ParamId>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    fn into_param_map(self, tape: &Tape) -> GradientMap {
        let mut map = BTreeMap::new();
        for (i, (g, p)) in self.grads.into_iter().zip(self.params).enumerate() {
            let Some(p) = p else { continue };
            let g = g.unwrap_or_else(|| Tensor::zeros_like(&tape.nodes[i].value));
            match map.entry(p) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    let acc: &mut Tensor = e.get_mut();
                    acc.add_assign(&g)
                        .expect("parameter registered twice with different shapes");
                }
            }
        }
        GradientMap(map)
    }
}

/// Parameter gradients keyed by [`ParamId`], iterated in id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap(BTreeMap<ParamId, Tensor>);

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.0.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.0.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Euclidean norm over all gradients concatenated.
    pub fn norm(&self) -> f64 {
        grad_norm(self)
    }
}

pub fn grad_norm(g: &GradientMap) -> f64 {
    g.0.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Finite-difference step size.
#[derive(Clone, Copy, Debug)]
pub enum Step {
    Fixed(f64),
    /// `scale * (1 + |p_i|)` per coordinate.
    Relative(f64),
}

impl Step {
    pub fn at(self, value: f64) -> f64 {
        match self {
            Step::Fixed(h) => h,
            Step::Relative(s) => s * (1.0 + value.abs()),
        }
    }
}

/// Central difference of `f` along coordinate `index` of `p`.
pub fn finite_diff_entry(
    f: &mut impl FnMut(&Tensor) -> f64,
    p: &Tensor,
    index: usize,
    step: Step,
) -> f64 {
    let h = step.at(p.data()[index]);
    let mut probe = p.clone();
    probe.data_mut()[index] = p.data()[index] + h;
    let up = f(&probe);
    probe.data_mut()[index] = p.data()[index] - h;
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

/// Central-difference gradient of `f` at `p`, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, p: &Tensor, step: Step) -> Tensor {
    let mut out = Tensor::zeros_like(p);
    for i in 0..p.len() {
        out.data_mut()[i] = finite_diff_entry(&mut f, p, i, step);
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps exact zeros (e.g. masked-out units) from dividing by zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
