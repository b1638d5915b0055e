//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its value plus what
//! its backward rule needs. [`Graph::backward`] walks the tape in reverse.
//! Leaves created with `requires_grad = false` (frozen parameters, inputs,
//! constants) never receive a gradient.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, sigmoid_scalar, Padding};
use super::layer::{dropout_mask, Mode};
use super::{Element, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        stride: usize,
        padding: Padding,
    },
    Depthwise {
        input: usize,
        weight: usize,
        stride: usize,
        padding: Padding,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Swish(usize),
    Sigmoid(usize),
    Relu(usize),
    GlobalAvgPool(usize),
    Add(usize, usize),
    ChannelScale {
        x: usize,
        gate: usize,
    },
    Dropout {
        input: usize,
        mask: Vec<T>,
    },
    Softmax(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    WeightedSum {
        input: usize,
        weights: Tensor<T>,
    },
    Sum(usize),
    Reshape(usize),
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of a batch-norm node in train mode: the batch moments to fold into
/// running statistics after the step.
#[derive(Debug, Clone)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T: Element = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "Var belongs to a different graph");
        v.index
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v)].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xi, wi) = (self.idx(x), self.idx(w));
        let out = kernels::conv2d_forward(&self.nodes[xi].value, &self.nodes[wi].value, stride, padding)?;
        let rg = self.rg(xi) || self.rg(wi);
        Ok(self.push(
            out,
            Op::Conv2d {
                input: xi,
                weight: wi,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xi, wi) = (self.idx(x), self.idx(w));
        let out = kernels::depthwise_forward(&self.nodes[xi].value, &self.nodes[wi].value, stride, padding)?;
        let rg = self.rg(xi) || self.rg(wi);
        Ok(self.push(
            out,
            Op::Depthwise {
                input: xi,
                weight: wi,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x), self.idx(w));
        let bi = b.map(|b| self.idx(b));
        let out = kernels::dense_forward(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|i| &self.nodes[i].value),
        )?;
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|i| self.rg(i));
        Ok(self.push(
            out,
            Op::Dense {
                input: xi,
                weight: wi,
                bias: bi,
            },
            rg,
        ))
    }

    /// Batch norm over every axis but the last. `running` supplies the stored
    /// `(mean, variance)` used in infer mode; in train mode the batch moments
    /// are returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        mode: Mode,
        epsilon: T,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let (xi, gi, bi) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let c = self.nodes[xi].value.last_dim();
        for (name, len) in [
            ("scale", self.nodes[gi].value.len()),
            ("shift", self.nodes[bi].value.len()),
            ("running mean", running.0.len()),
            ("running variance", running.1.len()),
        ] {
            if len != c {
                return Err(Error::shape("batch_norm", name, c, len));
            }
        }
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                let (m, v) = kernels::channel_moments(&self.nodes[xi].value);
                (m, v, true)
            }
            Mode::Infer => (running.0.to_vec(), running.1.to_vec(), false),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
        let (out, xhat) = kernels::batch_norm_apply(
            &self.nodes[xi].value,
            &mean,
            &inv_std,
            self.nodes[gi].value.data(),
            self.nodes[bi].value.data(),
        );
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        let v = self.push(
            out,
            Op::BatchNorm {
                input: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, batch_stats.then_some(BatchMoments { mean, var })))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Var {
        let xi = self.idx(x);
        let out = self.nodes[xi].value.map(f);
        let rg = self.rg(xi);
        self.push(out, op(xi), rg)
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid_scalar(v), Op::Swish)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let out = kernels::global_avg_pool_forward(&self.nodes[xi].value)?;
        let rg = self.rg(xi);
        Ok(self.push(out, Op::GlobalAvgPool(xi), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let out = super::layer::residual_add(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::Add(ai, bi), rg))
    }

    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xi, gi) = (self.idx(x), self.idx(gate));
        let out = kernels::channel_scale_forward(&self.nodes[xi].value, &self.nodes[gi].value)?;
        let rg = self.rg(xi) || self.rg(gi);
        Ok(self.push(out, Op::ChannelScale { x: xi, gate: gi }, rg))
    }

    /// Inverted dropout; identity (and no node) in infer mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let xi = self.idx(x);
        let mask = dropout_mask::<T>(self.nodes[xi].value.len(), rate, seed);
        let out = Tensor::new(
            self.nodes[xi].value.shape().to_vec(),
            self.nodes[xi]
                .value
                .data()
                .iter()
                .zip(&mask)
                .map(|(&a, &m)| a * m)
                .collect(),
        )?;
        let rg = self.rg(xi);
        Ok(self.push(out, Op::Dropout { input: xi, mask }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let out = kernels::softmax_rows(&self.nodes[xi].value);
        let rg = self.rg(xi);
        self.push(out, Op::Softmax(xi), rg)
    }

    /// Mean categorical cross-entropy of softmax(logits) against class
    /// indices. Probabilities are clamped at 1e-12 before the log.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits);
        let (b, k) = self.nodes[li].value.dims2("softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape("softmax_cross_entropy", "labels", b, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let probs = kernels::softmax_rows(&self.nodes[li].value);
        let mut loss = T::zero();
        for (row, &l) in probs.data().chunks(k).zip(labels) {
            loss += cross_entropy(row, l);
        }
        loss = loss / T::from_f64(b as f64);
        let rg = self.rg(li);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `sum(x * weights)` with constant weights; used to build scalar probes.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xi = self.idx(x);
        if weights.shape() != self.nodes[xi].value.shape() {
            return Err(Error::shape(
                "weighted_sum",
                "weights",
                format!("{:?}", self.nodes[xi].value.shape()),
                format!("{:?}", weights.shape()),
            ));
        }
        let s = self.nodes[xi]
            .value
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input: xi, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let s = self.nodes[xi].value.sum();
        let rg = self.rg(xi);
        self.push(Tensor::scalar(s), Op::Sum(xi), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x);
        let out = self.nodes[xi].value.clone().reshape(shape)?;
        let rg = self.rg(xi);
        Ok(self.push(out, Op::Reshape(xi), rg))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_with(loss, Tensor::scalar(T::one()))
    }

    /// Backpropagates `seed` (same shape as `output`) through the tape.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::NoForwardRecord("graph is empty".into()));
        }
        if output.graph != self.id || output.index >= self.nodes.len() {
            return Err(Error::NoForwardRecord("variable was not recorded on this graph".into()));
        }
        let out_i = output.index;
        if seed.shape() != self.nodes[out_i].value.shape() {
            return Err(Error::shape(
                "backward",
                "seed",
                format!("{:?}", self.nodes[out_i].value.shape()),
                format!("{:?}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=out_i).map(|_| None).collect();
        grads[out_i] = Some(seed);
        for i in (0..=out_i).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |j: usize, t: Tensor<T>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(t),
            }
        };
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            } => {
                let (gx, gw) = kernels::conv2d_backward(val(input), val(weight), g, stride, padding, self.rg(input))?;
                if let Some(gx) = gx {
                    acc(input, gx);
                }
                acc(weight, gw);
            }
            &Op::Depthwise {
                input,
                weight,
                stride,
                padding,
            } => {
                let (gx, gw) =
                    kernels::depthwise_backward(val(input), val(weight), g, stride, padding, self.rg(input))?;
                if let Some(gx) = gx {
                    acc(input, gx);
                }
                acc(weight, gw);
            }
            &Op::Dense { input, weight, bias } => {
                let (gx, gw, gb) = kernels::dense_backward(val(input), val(weight), g)?;
                acc(input, gx);
                acc(weight, gw);
                if let Some(b) = bias {
                    acc(b, gb);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (dx, dgamma, dbeta) =
                    kernels::batch_norm_backward(xhat, inv_std, val(*gamma).data(), g, *batch_stats);
                acc(*input, dx);
                acc(*gamma, Tensor::new(val(*gamma).shape().to_vec(), dgamma)?);
                acc(*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta)?);
            }
            &Op::Swish(x) => {
                let d = val(x).zip_map(g, |v, gv| {
                    let s = sigmoid_scalar(v);
                    gv * s * (T::one() + v * (T::one() - s))
                });
                acc(x, d);
            }
            &Op::Sigmoid(x) => {
                let d = node.value.zip_map(g, |s, gv| gv * s * (T::one() - s));
                acc(x, d);
            }
            &Op::Relu(x) => {
                let d = val(x).zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() });
                acc(x, d);
            }
            &Op::GlobalAvgPool(x) => {
                acc(x, kernels::global_avg_pool_backward(val(x).shape(), g));
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::ChannelScale { x, gate } => {
                let (gx, gg) = kernels::channel_scale_backward(val(x), val(gate), g);
                acc(x, gx);
                acc(gate, gg);
            }
            Op::Dropout { input, mask } => {
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect(),
                )?;
                acc(*input, d);
            }
            &Op::Softmax(x) => {
                let p = &node.value;
                let k = p.last_dim();
                let mut d = Vec::with_capacity(p.len());
                for (pr, gr) in p.data().chunks(k).zip(g.data().chunks(k)) {
                    let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(pr.iter().zip(gr).map(|(&pv, &gv)| pv * (gv - dot)));
                }
                acc(x, Tensor::new(p.shape().to_vec(), d)?);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = probs.last_dim();
                let scale = g.data()[0] / T::from_f64(labels.len() as f64);
                let mut d = probs.data().to_vec();
                for (row, &l) in d.chunks_mut(k).zip(labels) {
                    row[l] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, Tensor::new(probs.shape().to_vec(), d)?);
            }
            Op::WeightedSum { input, weights } => {
                let s = g.data()[0];
                acc(*input, weights.map(|w| w * s));
            }
            &Op::Sum(x) => {
                acc(x, Tensor::full(val(x).shape(), g.data()[0]));
            }
            &Op::Reshape(x) => {
                acc(x, g.clone().reshape(val(x).shape())?);
            }
        }
        Ok(())
    }
}

/// `-ln(max(p[label], 1e-12))` for one probability row.
pub fn cross_entropy<T: Element>(probs: &[T], label: usize) -> T {
    -probs[label].max(T::from_f64(1e-12)).ln()
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T: Element = f32> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of `v`, or `None` for frozen leaves and nodes the output does
    /// not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}
