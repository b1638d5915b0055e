//! Layer-level kernels: validated entry points taking [`LayerParams`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, sigmoid_scalar};
use super::{Element, Tensor};
use crate::error::{Error, Result};

pub use super::kernels::Padding;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    Dense,
    BatchNorm,
}

/// Running statistics and affine parameters of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T: Element = f32> {
    pub mean: Tensor<T>,
    pub variance: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Element> BnStats<T> {
    /// Fresh statistics: zero mean, unit variance, scale 1, shift 0.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            variance: Tensor::ones(&[channels]),
            scale: Tensor::ones(&[channels]),
            shift: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Exponential moving average toward the given batch moments.
    pub fn update_running(&mut self, batch_mean: &[T], batch_var: &[T], momentum: T) {
        let keep = momentum;
        let take = T::one() - momentum;
        for (m, &b) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *m = *m * keep + b * take;
        }
        for (v, &b) in self.variance.data_mut().iter_mut().zip(batch_var) {
            *v = *v * keep + b * take;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Element = f32> {
    pub kind: LayerKind,
    pub weights: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
    pub bn_stats: Option<BnStats<T>>,
    pub trainable: bool,
}

impl<T: Element> LayerParams<T> {
    pub fn conv(weights: Tensor<T>) -> Self {
        Self {
            kind: LayerKind::Conv,
            weights: Some(weights),
            bias: None,
            bn_stats: None,
            trainable: true,
        }
    }

    pub fn depthwise(weights: Tensor<T>) -> Self {
        Self {
            kind: LayerKind::DepthwiseConv,
            ..Self::conv(weights)
        }
    }

    pub fn dense(weights: Tensor<T>, bias: Option<Tensor<T>>) -> Self {
        Self {
            kind: LayerKind::Dense,
            weights: Some(weights),
            bias,
            bn_stats: None,
            trainable: true,
        }
    }

    pub fn batch_norm(stats: BnStats<T>) -> Self {
        Self {
            kind: LayerKind::BatchNorm,
            weights: None,
            bias: None,
            bn_stats: Some(stats),
            trainable: true,
        }
    }

    /// Checks weight ranks and BN stat lengths against the declared kind.
    pub fn validate(&self) -> Result<()> {
        let need_rank = |r: usize| -> Result<&Tensor<T>> {
            let w = self
                .weights
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("{:?} layer without weights", self.kind)))?;
            if w.rank() != r {
                return Err(Error::shape("layer", "weight rank", r, w.rank()));
            }
            Ok(w)
        };
        match self.kind {
            LayerKind::Conv => {
                need_rank(4)?;
            }
            LayerKind::DepthwiseConv => {
                let w = need_rank(4)?;
                if w.shape()[3] != 1 {
                    return Err(Error::shape("layer", "depthwise multiplier", 1, w.shape()[3]));
                }
            }
            LayerKind::Dense => {
                let w = need_rank(2)?;
                if let Some(b) = &self.bias {
                    if b.len() != w.shape()[1] {
                        return Err(Error::shape("layer", "bias length", w.shape()[1], b.len()));
                    }
                }
            }
            LayerKind::BatchNorm => {
                let s = self
                    .bn_stats
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("batch norm layer without stats".into()))?;
                let c = s.channels();
                for (name, t) in [("mean", &s.mean), ("variance", &s.variance), ("shift", &s.shift)] {
                    if t.len() != c {
                        return Err(Error::shape("layer", format!("bn {name} length"), c, t.len()));
                    }
                }
            }
        }
        Ok(())
    }

    fn expect_kind(&self, op: &'static str, kind: LayerKind) -> Result<&Tensor<T>> {
        if self.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "{op} expects a {kind:?} layer, got {:?}",
                self.kind
            )));
        }
        self.validate()?;
        Ok(self.weights.as_ref().expect("validated"))
    }
}

pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let w = params.expect_kind("conv2d", LayerKind::Conv)?;
    kernels::conv2d_forward(input, w, stride, padding)
}

pub fn depthwise_conv2d<T: Element>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let w = params.expect_kind("depthwise_conv2d", LayerKind::DepthwiseConv)?;
    kernels::depthwise_forward(input, w, stride, padding)
}

pub fn dense<T: Element>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    let w = params.expect_kind("dense", LayerKind::Dense)?;
    kernels::dense_forward(input, w, params.bias.as_ref())
}

pub struct BatchNormOutput<T: Element = f32> {
    pub output: Tensor<T>,
    /// Batch moments in train mode; callers fold them into running stats.
    pub batch_mean: Option<Vec<T>>,
    pub batch_var: Option<Vec<T>>,
}

/// Normalizes over every axis but the last. In train mode the batch moments
/// are used and returned; in infer mode the stored running stats are used.
pub fn batch_norm<T: Element>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    mode: Mode,
    epsilon: T,
) -> Result<BatchNormOutput<T>> {
    if params.kind != LayerKind::BatchNorm {
        return Err(Error::InvalidArgument(format!(
            "batch_norm expects a BatchNorm layer, got {:?}",
            params.kind
        )));
    }
    params.validate()?;
    let stats = params.bn_stats.as_ref().expect("validated");
    let c = input.last_dim();
    if c != stats.channels() {
        return Err(Error::shape("batch_norm", "channels", stats.channels(), c));
    }
    let (mean, var, batch) = match mode {
        Mode::Train => {
            let (m, v) = kernels::channel_moments(input);
            (m, v, true)
        }
        Mode::Infer => (stats.mean.data().to_vec(), stats.variance.data().to_vec(), false),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
    let (output, _) = kernels::batch_norm_apply(input, &mean, &inv_std, stats.scale.data(), stats.shift.data());
    Ok(BatchNormOutput {
        output,
        batch_mean: batch.then(|| mean.clone()),
        batch_var: batch.then_some(var),
    })
}

pub fn swish<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x * sigmoid_scalar(x))
}

pub fn sigmoid<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn softmax<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    kernels::softmax_rows(input)
}

/// Keep-mask with survivors scaled by `1/(1-rate)`.
pub fn dropout_mask<T: Element>(len: usize, rate: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

/// Inverted dropout. Identity in infer mode or at rate 0.
pub fn dropout<T: Element>(input: &Tensor<T>, rate: f64, mode: Mode, seed: Option<u64>) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(input.clone());
    }
    let seed = seed.ok_or_else(|| Error::InvalidArgument("train-mode dropout requires a seed".into()))?;
    let mask = dropout_mask::<T>(input.len(), rate, seed);
    Tensor::new(
        input.shape().to_vec(),
        input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
    )
}

pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::global_avg_pool_forward(input)
}

pub fn residual_add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "residual_add",
            "shape",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(a.zip_map(b, |x, y| x + y))
}
