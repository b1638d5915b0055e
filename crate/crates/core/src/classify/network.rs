//! An [`ArchSpec`] plus its parameters, evaluated on the autodiff tape.

use std::collections::HashMap;

use crate::arch::{ArchSpec, Block, HeadLayer, MbConvBlock};
use crate::error::{Error, Result};
use crate::tensor::graph::BatchMoments;
use crate::tensor::{Graph, Mode, Padding, Tensor, Var};
use crate::weights::{self, ParamStore};

pub const BN_EPSILON: f32 = 1e-3;
pub const BN_MOMENTUM: f32 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: ArchSpec,
    pub params: ParamStore,
}

/// Everything a forward pass leaves behind.
pub struct Forward {
    pub logits: Var,
    /// Last backbone feature map `(b, h, w, c)`, before pooling.
    pub features: Var,
    /// Trainable tensors by name, as recorded on the tape.
    pub trainable: Vec<(String, Var)>,
    /// Batch moments of every BN layer that ran on batch statistics.
    pub bn_moments: Vec<(String, BatchMoments<f32>)>,
}

/// How a pass treats batch norm, dropout and gradient tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassMode {
    /// Trainable BN layers normalize with batch statistics.
    pub batch_stats: bool,
    pub dropout: bool,
    /// Trainable parameters are recorded as gradient leaves.
    pub track: bool,
}

impl From<Mode> for PassMode {
    fn from(m: Mode) -> Self {
        let t = m == Mode::Train;
        Self {
            batch_stats: t,
            dropout: t,
            track: t,
        }
    }
}

impl PassMode {
    /// Batch statistics without dropout or gradients, for re-estimating
    /// running statistics.
    pub const CALIBRATE: PassMode = PassMode {
        batch_stats: true,
        dropout: false,
        track: false,
    };
}

struct Pass<'a> {
    net: &'a Network,
    g: &'a mut Graph<f32>,
    mode: PassMode,
    seed: u64,
    dropouts: u64,
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
    bn_moments: Vec<(String, BatchMoments<f32>)>,
}

impl Pass<'_> {
    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = self.net.params.get(name)?;
        let train = p.trainable && self.mode.track;
        let v = self.g.leaf(p.value.clone(), train);
        if train {
            self.trainable.push((name.to_string(), v));
        }
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, x: Var, layer: &str, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{layer}.w"))?;
        self.g.conv2d(x, w, stride, Padding::Same)
    }

    fn depthwise(&mut self, x: Var, layer: &str, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{layer}.w"))?;
        self.g.depthwise_conv2d(x, w, stride, Padding::Same)
    }

    fn dense(&mut self, x: Var, layer: &str) -> Result<Var> {
        let w = self.param(&format!("{layer}.w"))?;
        let b = self.param(&format!("{layer}.b"))?;
        self.g.dense(x, w, Some(b))
    }

    /// Batch statistics only for trainable layers in train mode; frozen
    /// layers behave exactly as at inference.
    fn bn(&mut self, x: Var, layer: &str) -> Result<Var> {
        let gamma = self.param(&format!("{layer}.gamma"))?;
        let beta = self.param(&format!("{layer}.beta"))?;
        let params = &self.net.params;
        let mean = params.tensor(&format!("{layer}.mean"))?;
        let var = params.tensor(&format!("{layer}.var"))?;
        let mode = if self.mode.batch_stats && params.layer_trainable(layer) {
            Mode::Train
        } else {
            Mode::Infer
        };
        let (y, moments) = self
            .g
            .batch_norm(x, gamma, beta, (mean.data(), var.data()), mode, BN_EPSILON)?;
        if let Some(m) = moments {
            self.bn_moments.push((layer.to_string(), m));
        }
        Ok(y)
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.dropouts += 1;
        let seed = self.seed ^ self.dropouts.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mode = if self.mode.dropout { Mode::Train } else { Mode::Infer };
        self.g.dropout(x, rate, mode, seed)
    }

    fn mbconv(&mut self, x: Var, m: &MbConvBlock) -> Result<Var> {
        let p = &m.prefix;
        let mut h = x;
        if m.expansion != 1 {
            h = self.conv(h, &format!("{p}.expand"), 1)?;
            h = self.bn(h, &format!("{p}.expand_bn"))?;
            h = self.g.swish(h);
        }
        h = self.depthwise(h, &format!("{p}.dw"), m.stride)?;
        h = self.bn(h, &format!("{p}.dw_bn"))?;
        h = self.g.swish(h);
        if m.se_channels.is_some() {
            let s = self.g.global_avg_pool(h)?;
            let s = self.dense(s, &format!("{p}.se_reduce"))?;
            let s = self.g.swish(s);
            let s = self.dense(s, &format!("{p}.se_expand"))?;
            let s = self.g.sigmoid(s);
            h = self.g.channel_scale(h, s)?;
        }
        h = self.conv(h, &format!("{p}.project"), 1)?;
        h = self.bn(h, &format!("{p}.project_bn"))?;
        if m.has_residual() {
            h = self.g.add(h, x)?;
        }
        Ok(h)
    }
}

impl Network {
    pub fn new(spec: ArchSpec, params: ParamStore) -> Result<Self> {
        params.validate_against(&spec)?;
        Ok(Self { spec, params })
    }

    /// Freshly initialized network.
    pub fn init(spec: ArchSpec, seed: u64) -> Self {
        let params = weights::init(&spec, seed);
        Self { spec, params }
    }

    pub fn input_resolution(&self) -> usize {
        self.spec.input_resolution
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.input_resolution();
        match shape {
            [_, h, w, 3] if *h == r && *w == r => Ok(()),
            [_, h, _, 3] if *h != r => Err(Error::ResolutionMismatch { expected: r, found: *h }),
            [_, _, w, 3] => Err(Error::ResolutionMismatch { expected: r, found: *w }),
            _ => Err(Error::shape(
                "network",
                "input",
                format!("(n, {r}, {r}, 3)"),
                format!("{shape:?}"),
            )),
        }
    }

    /// Records the full forward pass of `x` on `g`. Dropout masks derive from
    /// `seed`; in [`Mode::Infer`] no parameter is tracked for gradients.
    pub fn forward(&self, g: &mut Graph<f32>, x: Var, mode: impl Into<PassMode>, seed: u64) -> Result<Forward> {
        self.check_input(g.value(x).shape())?;
        let mut pass = Pass {
            net: self,
            g,
            mode: mode.into(),
            seed,
            dropouts: 0,
            vars: HashMap::new(),
            trainable: Vec::new(),
            bn_moments: Vec::new(),
        };
        let mut h = x;
        for block in self.spec.blocks() {
            h = match &block {
                Block::ConvBnAct { prefix, stride, .. } => {
                    let y = pass.conv(h, &format!("{prefix}.conv"), *stride)?;
                    let y = pass.bn(y, &format!("{prefix}.bn"))?;
                    pass.g.swish(y)
                }
                Block::MBConv(m) => pass.mbconv(h, m)?,
            };
        }
        let features = h;
        let mut z = pass.g.global_avg_pool(features)?;
        for layer in self.spec.head_layers() {
            z = match layer {
                HeadLayer::BatchNorm(name) => pass.bn(z, &name)?,
                HeadLayer::Dropout(rate) => pass.dropout(z, rate)?,
                HeadLayer::Dense(name) => pass.dense(z, &name)?,
                HeadLayer::Swish => pass.g.swish(z),
            };
        }
        Ok(Forward {
            logits: z,
            features,
            trainable: pass.trainable,
            bn_moments: pass.bn_moments,
        })
    }

    /// Inference-mode `(features, logits)` for a batch `(n, r, r, 3)`.
    pub fn infer(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let f = self.forward(&mut g, x, Mode::Infer, 0)?;
        Ok((g.value(f.features).clone(), g.value(f.logits).clone()))
    }

    /// Replaces the running statistics of every trainable BN layer with
    /// moments averaged over `batches`, each pass normalizing with batch
    /// statistics so later layers see the inputs they were trained on.
    pub fn recalibrate_bn(&mut self, batches: impl IntoIterator<Item = Result<Tensor>>) -> Result<()> {
        let mut sums: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
        let mut count = 0usize;
        for batch in batches {
            let mut g = Graph::new();
            let x = g.constant(batch?);
            let f = self.forward(&mut g, x, PassMode::CALIBRATE, 0)?;
            if sums.is_empty() {
                sums = f
                    .bn_moments
                    .iter()
                    .map(|(n, m)| (n.clone(), vec![0.0; m.mean.len()], vec![0.0; m.var.len()]))
                    .collect();
            }
            for ((_, sm, sv), (_, m)) in sums.iter_mut().zip(&f.bn_moments) {
                sm.iter_mut().zip(&m.mean).for_each(|(a, &b)| *a += b as f64);
                sv.iter_mut().zip(&m.var).for_each(|(a, &b)| *a += b as f64);
            }
            count += 1;
        }
        for (layer, sm, sv) in sums {
            for (suffix, s) in [("mean", sm), ("var", sv)] {
                let t = &mut self.params.get_mut(&format!("{layer}.{suffix}"))?.value;
                for (r, v) in t.data_mut().iter_mut().zip(s) {
                    *r = (v / count as f64) as f32;
                }
            }
        }
        Ok(())
    }

    /// Folds batch moments into the running statistics.
    pub fn update_bn_stats(&mut self, moments: &[(String, BatchMoments<f32>)]) -> Result<()> {
        for (layer, m) in moments {
            for (suffix, batch) in [("mean", &m.mean), ("var", &m.var)] {
                let t = &mut self.params.get_mut(&format!("{layer}.{suffix}"))?.value;
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = *r * BN_MOMENTUM + b * (1.0 - BN_MOMENTUM);
                }
            }
        }
        Ok(())
    }
}
