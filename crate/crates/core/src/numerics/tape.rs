//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node whose inputs are earlier nodes, so the
//! node vector is already in topological order. [`Tape::backward`] walks it
//! once in reverse.

use std::collections::BTreeMap;

use super::conv::{self, ConvGeometry};
use super::norm::{self, BatchStats, BnMode, BnSaved};
use super::tensor::{softmax, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a parameter inside the bundle it was read from.
pub type ParamId = usize;

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
    },
    Relu6(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved,
        mode: BnMode,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
    },
    ChannelScale {
        input: Var,
        scale: Var,
    },
    Softmax(Var),
    MatVecConst {
        matrix: Vec<f32>,
        rows: usize,
        cols: usize,
        vector: Var,
    },
    Dot(Var, Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    PadChannels {
        input: Var,
        from: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu6(_) => "relu6",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Softmax(_) => "softmax",
            Op::MatVecConst { .. } => "matvec_const",
            Op::Dot(..) => "dot",
            Op::Linear { .. } => "linear",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::PadChannels { .. } => "pad_channels",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    conv_madds: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Multiply-adds executed by every convolution recorded so far.
    pub fn conv_madds(&self) -> u64 {
        self.conv_madds
    }

    /// Number of recorded primitive applications, keyed by primitive name.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for node in &self.nodes {
            if !matches!(node.op, Op::Leaf { .. }) {
                *counts.entry(node.op.name()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// (parameter id, node) for every parameter leaf that tracks gradients.
    pub fn tracked_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf { param: Some(id) } if n.requires_grad => Some((id, Var(i))),
            _ => None,
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut value = value;
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; gradients are tracked when `value.requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad;
        self.push(value, Op::Leaf { param: None }, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Records a copy of a named parameter. `track` gates gradient tracking.
    pub fn param(&mut self, id: ParamId, value: &Tensor, track: bool) -> Var {
        let rg = track && value.requires_grad;
        self.push(value.clone(), Op::Leaf { param: Some(id) }, rg)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding, groups)?;
        let out = conv::forward(self.value(input).data(), self.value(weight).data(), &geom);
        self.conv_madds += geom.madds();
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(value, Op::Conv2d { input, weight, geom }, rg))
    }

    pub fn relu6(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.clamp(0.0, 6.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu6(input), rg)
    }

    fn check_bn(&self, input: Var, gamma: Var, beta: Var) -> Result<usize> {
        let shape = self.shape(input);
        if shape.len() < 2 {
            return Err(Error::dim(format!(
                "batch_norm input needs a channel axis, got {shape:?}"
            )));
        }
        let c = shape[1];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim(format!(
                "batch_norm over {c} channels given gamma/shift of {} and {}",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        Ok(c)
    }

    /// Train-mode batch norm. Returns the batch statistics so the caller can
    /// fold them into its running estimates.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchStats)> {
        if eps <= 0.0 {
            return Err(Error::param("batch_norm eps must be positive"));
        }
        self.check_bn(input, gamma, beta)?;
        let x = self.value(input);
        let (y, saved, stats) = norm::forward_train(
            x.data(),
            x.shape(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::new(x.shape().to_vec(), y)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
                mode: BnMode::Train,
            },
            rg,
        );
        Ok((var, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::param("batch_norm eps must be positive"));
        }
        let c = self.check_bn(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm running statistics have the wrong length"));
        }
        let x = self.value(input);
        let (y, saved) = norm::forward_eval(
            x.data(),
            x.shape(),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        );
        let value = Tensor::new(x.shape().to_vec(), y)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
                mode: BnMode::Eval,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Scale(input, factor), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f32 = self.value(input).data().iter().sum();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    /// `Σ_i weights[i] · inputs[i]` over same-shape inputs.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::contract("weighted_sum of no inputs"))?;
        if self.value(weights).numel() != inputs.len() {
            return Err(Error::dim(format!(
                "weighted_sum: {} weights for {} inputs",
                self.value(weights).numel(),
                inputs.len()
            )));
        }
        for &v in &inputs[1..] {
            self.same_shape(first, v, "weighted_sum")?;
        }
        let w = self.value(weights).data();
        let mut out = vec![0.0f32; self.value(first).numel()];
        for (i, &v) in inputs.iter().enumerate() {
            let wi = w[i];
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += wi * x;
            }
        }
        let value = Tensor::new(self.shape(first).to_vec(), out)?;
        let mut all = inputs.to_vec();
        all.push(weights);
        let rg = self.any_grad(&all);
        Ok(self.push(
            value,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Multiplies channel `c` of an NCHW (or NC) tensor by `scale[c]`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || self.value(scale).numel() != shape[1] {
            return Err(Error::dim(format!(
                "channel_scale: {} factors for input {shape:?}",
                self.value(scale).numel()
            )));
        }
        let (n, c, hw) = norm::dims(&shape);
        let s = self.value(scale).data();
        let x = self.value(input).data();
        let mut out = vec![0.0f32; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = x[i] * s[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[input, scale]);
        Ok(self.push(value, Op::ChannelScale { input, scale }, rg))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let x = self.value(logits);
        if x.shape().len() != 1 {
            return Err(Error::dim(format!("softmax expects a vector, got {:?}", x.shape())));
        }
        let value = Tensor::new(x.shape().to_vec(), softmax(x.data()))?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(value, Op::Softmax(logits), rg))
    }

    /// `matrix · vector` for a constant row-major `rows × cols` matrix.
    pub fn matvec_const(&mut self, matrix: Vec<f32>, rows: usize, cols: usize, vector: Var) -> Result<Var> {
        if matrix.len() != rows * cols || self.value(vector).numel() != cols {
            return Err(Error::dim(format!(
                "matvec: {rows}x{cols} matrix with {} entries against vector of {}",
                matrix.len(),
                self.value(vector).numel()
            )));
        }
        let v = self.value(vector).data();
        let out: Vec<f32> = (0..rows)
            .map(|r| matrix[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        let value = Tensor::new(vec![rows], out)?;
        let rg = self.any_grad(&[vector]);
        Ok(self.push(
            value,
            Op::MatVecConst {
                matrix,
                rows,
                cols,
                vector,
            },
            rg,
        ))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::dim("dot: operand lengths differ"));
        }
        let total: f32 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(total), Op::Dot(a, b), rg))
    }

    /// `input[N,F] · weight[C,F]ᵀ + bias[C]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(bias).numel() != ws[0] {
            return Err(Error::dim(format!(
                "linear: input {xs:?}, weight {ws:?}, bias {:?}",
                self.shape(bias)
            )));
        }
        let (n, f, c) = (xs[0], xs[1], ws[0]);
        let (x, w, b) = (
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let mut out = vec![0.0f32; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = b[j]
                    + x[i * f..(i + 1) * f]
                        .iter()
                        .zip(&w[j * f..(j + 1) * f])
                        .map(|(p, q)| p * q)
                        .sum::<f32>();
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// `[N,C,H,W] -> [N,C]` mean over spatial positions.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool expects NCHW, got {shape:?}")));
        }
        let (n, c, hw) = norm::dims(&shape);
        let x = self.value(input).data();
        let out = (0..n * c)
            .map(|i| x[i * hw..(i + 1) * hw].iter().sum::<f32>() / hw as f32)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    /// Mean softmax cross-entropy of `logits[N,C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::param(format!("label {bad} out of range for {c} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            loss += (lse - row[labels[i]]) as f64;
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar((loss / n as f64) as f32);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Zero-pads the channel axis of an NCHW tensor up to `channels`.
    pub fn pad_channels(&mut self, input: Var, channels: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 || channels < shape[1] {
            return Err(Error::dim(format!("cannot pad {shape:?} to {channels} channels")));
        }
        let (n, c, hw) = norm::dims(&shape);
        let x = self.value(input).data();
        let mut out = vec![0.0f32; n * channels * hw];
        for b in 0..n {
            out[b * channels * hw..][..c * hw].copy_from_slice(&x[b * c * hw..][..c * hw]);
        }
        let value = Tensor::new(vec![n, channels, shape[2], shape[3]], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::PadChannels { input, from: c }, rg))
    }

    /// Computes d`loss`/d`node` for every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d { input, weight, geom } => {
                if needs(*input) {
                    let gx = conv::backward_input(g, self.value(*weight).data(), geom);
                    accumulate(grads, *input, gx);
                }
                if needs(*weight) {
                    let gw = conv::backward_weight(g, self.value(*input).data(), geom);
                    accumulate(grads, *weight, gw);
                }
            }
            Op::Relu6(input) => {
                let x = self.value(*input).data();
                let gx = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 && v < 6.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *input, gx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
                mode,
            } => {
                let (gx, gg, gb) = norm::backward(g, self.shape(*input), self.value(*gamma).data(), saved, *mode);
                if needs(*input) {
                    accumulate(grads, *input, gx);
                }
                if needs(*gamma) {
                    accumulate(grads, *gamma, gg);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(input, factor) => {
                accumulate(grads, *input, g.iter().map(|v| v * factor).collect());
            }
            Op::Sum(input) => {
                let n = self.value(*input).numel();
                accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::WeightedSum { inputs, weights } => {
                let w = self.value(*weights).data();
                if needs(*weights) {
                    let gw = inputs
                        .iter()
                        .map(|v| self.value(*v).data().iter().zip(g).map(|(x, y)| x * y).sum())
                        .collect();
                    accumulate(grads, *weights, gw);
                }
                for (i, v) in inputs.iter().enumerate() {
                    if needs(*v) {
                        accumulate(grads, *v, g.iter().map(|x| x * w[i]).collect());
                    }
                }
            }
            Op::ChannelScale { input, scale } => {
                let (n, c, hw) = norm::dims(self.shape(*input));
                let x = self.value(*input).data();
                let s = self.value(*scale).data();
                if needs(*scale) {
                    let mut gs = vec![0.0f32; c];
                    for b in 0..n {
                        for (ch, acc) in gs.iter_mut().enumerate() {
                            let base = (b * c + ch) * hw;
                            *acc += x[base..base + hw]
                                .iter()
                                .zip(&g[base..base + hw])
                                .map(|(p, q)| p * q)
                                .sum::<f32>();
                        }
                    }
                    accumulate(grads, *scale, gs);
                }
                if needs(*input) {
                    let mut gx = vec![0.0f32; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                gx[i] = g[i] * s[ch];
                            }
                        }
                    }
                    accumulate(grads, *input, gx);
                }
            }
            Op::Softmax(input) => {
                let y = node.value.data();
                let inner: f32 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                accumulate(
                    grads,
                    *input,
                    y.iter().zip(g).map(|(yi, gi)| yi * (gi - inner)).collect(),
                );
            }
            Op::MatVecConst {
                matrix,
                rows,
                cols,
                vector,
            } => {
                let mut gv = vec![0.0f32; *cols];
                for r in 0..*rows {
                    for (c, acc) in gv.iter_mut().enumerate() {
                        *acc += matrix[r * cols + c] * g[r];
                    }
                }
                accumulate(grads, *vector, gv);
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    accumulate(grads, *a, vb.iter().map(|v| v * g[0]).collect());
                }
                if needs(*b) {
                    accumulate(grads, *b, va.iter().map(|v| v * g[0]).collect());
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, f) = (self.shape(*input)[0], self.shape(*input)[1]);
                let c = self.shape(*weight)[0];
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                if needs(*input) {
                    let mut gx = vec![0.0f32; n * f];
                    for i in 0..n {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            for k in 0..f {
                                gx[i * f + k] += gij * w[j * f + k];
                            }
                        }
                    }
                    accumulate(grads, *input, gx);
                }
                if needs(*weight) {
                    let mut gw = vec![0.0f32; c * f];
                    for i in 0..n {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            for k in 0..f {
                                gw[j * f + k] += gij * x[i * f + k];
                            }
                        }
                    }
                    accumulate(grads, *weight, gw);
                }
                if needs(*bias) {
                    let mut gb = vec![0.0f32; c];
                    for i in 0..n {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::GlobalAvgPool(input) => {
                let (n, c, hw) = norm::dims(self.shape(*input));
                let mut gx = vec![0.0f32; n * c * hw];
                for i in 0..n * c {
                    let v = g[i] / hw as f32;
                    gx[i * hw..(i + 1) * hw].iter_mut().for_each(|x| *x = v);
                }
                accumulate(grads, *input, gx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f32;
                let mut gx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * c + l] -= scale;
                }
                accumulate(grads, *logits, gx);
            }
            Op::PadChannels { input, from } => {
                let shape = node.value.shape();
                let (n, c, hw) = norm::dims(shape);
                let mut gx = Vec::with_capacity(n * from * hw);
                for b in 0..n {
                    gx.extend_from_slice(&g[b * c * hw..][..from * hw]);
                }
                accumulate(grads, *input, gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], var: Var, g: Vec<f32>) {
    match &mut grads[var.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
        slot @ None => *slot = Some(g),
    }
}
