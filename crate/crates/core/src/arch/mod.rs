//! Compound-scaled EfficientNet B0–B5 architecture generation.
//!
//! [`build_arch`] resolves a variant into an [`ArchSpec`]: the nine backbone
//! stages of the B0 baseline scaled in depth and width, followed by either
//! the four-block classification head (BN/Dropout, FC 512, FC 128, FC NC) or
//! the stock ImageNet top (pool, dropout, FC 1000).
//!
//! [`ArchSpec::blocks`] and [`ArchSpec::layers`] expand a spec into concrete
//! blocks and parameter-bearing layers; cost counting, weight init and the
//! forward pass are all driven from that one expansion.

pub mod cost;
pub mod text;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use cost::{count_macs, count_params, estimate_memory, CostReport};

/// Default compound-scaling bases.
pub const DEFAULT_ALPHA: f64 = 1.2;
pub const DEFAULT_BETA: f64 = 1.1;
pub const DEFAULT_GAMMA: f64 = 1.15;

/// SE bottleneck width as a fraction of the block input channels.
pub const SE_RATIO: f64 = 0.25;

/// Widths of the two hidden FC layers in the classification head.
pub const HEAD_FC1_UNITS: usize = 512;
pub const HEAD_FC2_UNITS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingConfig {
    alpha: f64,
    beta: f64,
    gamma: f64,
    phi: f64,
}

impl ScalingConfig {
    /// Rejects bases below 1, negative `phi`, and `alpha * beta^2 * gamma^2`
    /// outside `[1.9, 2.1]`.
    pub fn new(alpha: f64, beta: f64, gamma: f64, phi: f64) -> Result<Self> {
        if alpha < 1.0 || beta < 1.0 || gamma < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "scaling bases must be >= 1 (alpha={alpha}, beta={beta}, gamma={gamma})"
            )));
        }
        if !(phi >= 0.0) {
            return Err(Error::InvalidArgument(format!("phi must be >= 0, got {phi}")));
        }
        let flops = alpha * beta * beta * gamma * gamma;
        if !(1.9..=2.1).contains(&flops) {
            return Err(Error::InvalidArgument(format!(
                "alpha * beta^2 * gamma^2 = {flops:.4} is not within [1.9, 2.1]"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            gamma,
            phi,
        })
    }

    pub fn with_defaults(phi: f64) -> Result<Self> {
        Self::new(DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GAMMA, phi)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn phi(&self) -> f64 {
        self.phi
    }
}

/// `(depth, width, resolution)` multipliers `(alpha^phi, beta^phi, gamma^phi)`.
pub fn scale(config: &ScalingConfig) -> (f64, f64, f64) {
    (
        config.alpha.powf(config.phi),
        config.beta.powf(config.phi),
        config.gamma.powf(config.phi),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    B0,
    B1,
    B2,
    B3,
    B4,
    B5,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::B0,
        Variant::B1,
        Variant::B2,
        Variant::B3,
        Variant::B4,
        Variant::B5,
    ];

    pub fn phi(self) -> u32 {
        self as u32
    }

    pub fn resolution(self) -> usize {
        match self {
            Variant::B0 => 224,
            Variant::B1 => 240,
            Variant::B2 => 260,
            Variant::B3 => 300,
            Variant::B4 => 380,
            Variant::B5 => 456,
        }
    }

    /// Tabulated `(depth_mult, width_mult)`.
    pub fn multipliers(self) -> (f64, f64) {
        match self {
            Variant::B0 => (1.0, 1.0),
            Variant::B1 => (1.1, 1.0),
            Variant::B2 => (1.2, 1.1),
            Variant::B3 => (1.4, 1.2),
            Variant::B4 => (1.8, 1.4),
            Variant::B5 => (2.2, 1.6),
        }
    }

    /// Dropout before the stock ImageNet classifier.
    pub fn top_dropout(self) -> f64 {
        match self {
            Variant::B0 | Variant::B1 => 0.2,
            Variant::B2 | Variant::B3 => 0.3,
            Variant::B4 | Variant::B5 => 0.4,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B{}", self.phi())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "B0" => Ok(Variant::B0),
            "B1" => Ok(Variant::B1),
            "B2" => Ok(Variant::B2),
            "B3" => Ok(Variant::B3),
            "B4" => Ok(Variant::B4),
            "B5" => Ok(Variant::B5),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operator {
    Conv,
    MBConv,
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operator::Conv => "Conv",
            Operator::MBConv => "MBConv",
        })
    }
}

/// One row of the stage table. `resolution` is the stage's input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StageSpec {
    pub operator: Operator,
    pub expansion: usize,
    pub kernel: usize,
    pub out_channels: usize,
    pub repeats: usize,
    pub stride: usize,
    pub resolution: usize,
}

impl StageSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match self.operator {
            Operator::MBConv => {
                if self.expansion != 1 && self.expansion != 6 {
                    return bad(format!("MBConv expansion must be 1 or 6, got {}", self.expansion));
                }
                if self.kernel != 3 && self.kernel != 5 {
                    return bad(format!("MBConv kernel must be 3 or 5, got {}", self.kernel));
                }
            }
            Operator::Conv => {
                if self.expansion != 1 {
                    return bad(format!("Conv stage expansion must be 1, got {}", self.expansion));
                }
                if ![1, 3].contains(&self.kernel) {
                    return bad(format!("Conv stage kernel must be 1 or 3, got {}", self.kernel));
                }
            }
        }
        if self.repeats == 0 || self.stride == 0 || self.out_channels == 0 || self.resolution == 0 {
            return bad(format!("stage fields must be positive: {self:?}"));
        }
        Ok(())
    }
}

/// The B0 baseline: `(operator, expansion, kernel, channels, repeats, stride)`.
const B0_STAGES: [(Operator, usize, usize, usize, usize, usize); 9] = [
    (Operator::Conv, 1, 3, 32, 1, 2),
    (Operator::MBConv, 1, 3, 16, 1, 1),
    (Operator::MBConv, 6, 3, 24, 2, 2),
    (Operator::MBConv, 6, 5, 40, 2, 2),
    (Operator::MBConv, 6, 3, 80, 3, 2),
    (Operator::MBConv, 6, 5, 112, 3, 1),
    (Operator::MBConv, 6, 5, 192, 4, 2),
    (Operator::MBConv, 6, 3, 320, 1, 1),
    (Operator::Conv, 1, 1, 1280, 1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSpec {
    pub num_classes: usize,
    /// Dropout after the BN on pooled features (block 10).
    pub pooled_dropout: f64,
    /// Dropout after the 512-unit FC (block 11).
    pub hidden_dropout: f64,
}

impl HeadSpec {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            pooled_dropout: 0.3,
            hidden_dropout: 0.3,
        }
    }
}

/// Which classifier sits on top of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Top {
    /// BN/Dropout, FC 512/BN/Swish/Dropout, FC 128/BN/Swish, FC NC/Softmax.
    Proposed,
    /// Global pool, dropout, FC NC (the stock ImageNet classifier).
    ImageNet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub variant: Variant,
    pub input_resolution: usize,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
    pub top: Top,
    pub include_se: bool,
}

/// Rounds a scaled channel count to the nearest multiple of 8 (minimum 8),
/// bumping up one step if that lands below 90% of the raw value.
pub fn round_channels(raw: f64) -> usize {
    const DIVISOR: usize = 8;
    let d = DIVISOR as f64;
    let mut c = (((raw + d / 2.0) / d).floor() as usize * DIVISOR).max(DIVISOR);
    if (c as f64) < 0.9 * raw {
        c += DIVISOR;
    }
    c
}

/// Ceiling of a scaled repeat count.
pub fn round_repeats(raw: f64) -> usize {
    // Products like 1.1 * 2 land a hair above the integer; strip that noise
    // before taking the ceiling.
    let r = (raw * 1e9).round() / 1e9;
    r.ceil().max(1.0) as usize
}

fn scaled_stages(depth_mult: f64, width_mult: f64, resolution: usize, unit_repeats: bool) -> Vec<StageSpec> {
    let mut res = resolution;
    B0_STAGES
        .iter()
        .enumerate()
        .map(|(i, &(operator, expansion, kernel, c, n, stride))| {
            let repeats = if unit_repeats || i == 0 || i == B0_STAGES.len() - 1 {
                1
            } else {
                round_repeats(n as f64 * depth_mult)
            };
            let stage = StageSpec {
                operator,
                expansion,
                kernel,
                out_channels: round_channels(c as f64 * width_mult),
                repeats,
                stride,
                resolution: res,
            };
            res = res.div_ceil(stride);
            stage
        })
        .collect()
}

/// Resolves a variant with the four-block classification head.
pub fn build_arch(variant: Variant, num_classes: usize, include_se: bool) -> Result<ArchSpec> {
    build_arch_with_top(variant, num_classes, include_se, Top::Proposed)
}

pub fn build_arch_with_top(variant: Variant, num_classes: usize, include_se: bool, top: Top) -> Result<ArchSpec> {
    let (d, w) = variant.multipliers();
    let spec = ArchSpec {
        variant,
        input_resolution: variant.resolution(),
        stages: scaled_stages(d, w, variant.resolution(), false),
        head: HeadSpec::new(num_classes),
        top,
        include_se,
    };
    spec.validate()?;
    Ok(spec)
}

/// Parses a variant name and resolves it (`"b3"`, `"B3"`).
pub fn build_arch_named(name: &str, num_classes: usize, include_se: bool) -> Result<ArchSpec> {
    build_arch(name.parse()?, num_classes, include_se)
}

/// A B0-shaped network for desk-scale training: every width scaled by
/// `width_mult`, every stage repeated once, arbitrary input resolution.
pub fn build_reduced(width_mult: f64, resolution: usize, num_classes: usize, include_se: bool) -> Result<ArchSpec> {
    if !(width_mult > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "width multiplier must be > 0, got {width_mult}"
        )));
    }
    let spec = ArchSpec {
        variant: Variant::B0,
        input_resolution: resolution,
        stages: scaled_stages(1.0, width_mult, resolution, true),
        head: HeadSpec::new(num_classes),
        top: Top::Proposed,
        include_se,
    };
    spec.validate()?;
    Ok(spec)
}

/// A fully expanded backbone block.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    /// Conv + BN + swish (stage 1 stem and stage 9 1x1 conv).
    ConvBnAct {
        prefix: String,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        in_res: usize,
        out_res: usize,
    },
    MBConv(MbConvBlock),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbConvBlock {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_res: usize,
    pub out_res: usize,
    /// SE bottleneck width when squeeze-and-excitation is enabled.
    pub se_channels: Option<usize>,
}

impl MbConvBlock {
    pub fn expanded(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

/// A parameter-bearing layer with its input/output spatial geometry.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerDesc {
    Conv {
        name: String,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        out_res: usize,
    },
    Depthwise {
        name: String,
        kernel: usize,
        channels: usize,
        out_res: usize,
    },
    /// `positions` is how many values per channel pass through (h*w, or 1).
    BatchNorm {
        name: String,
        channels: usize,
        positions: usize,
    },
    Dense {
        name: String,
        inputs: usize,
        units: usize,
    },
}

impl LayerDesc {
    pub fn name(&self) -> &str {
        match self {
            LayerDesc::Conv { name, .. }
            | LayerDesc::Depthwise { name, .. }
            | LayerDesc::BatchNorm { name, .. }
            | LayerDesc::Dense { name, .. } => name,
        }
    }

    /// `(tensor suffix, shape)` for every stored tensor of the layer.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            LayerDesc::Conv {
                name,
                kernel,
                in_channels,
                out_channels,
                ..
            } => vec![(format!("{name}.w"), vec![*kernel, *kernel, *in_channels, *out_channels])],
            LayerDesc::Depthwise {
                name, kernel, channels, ..
            } => vec![(format!("{name}.w"), vec![*kernel, *kernel, *channels, 1])],
            LayerDesc::BatchNorm { name, channels, .. } => ["gamma", "beta", "mean", "var"]
                .iter()
                .map(|r| (format!("{name}.{r}"), vec![*channels]))
                .collect(),
            LayerDesc::Dense { name, inputs, units } => vec![
                (format!("{name}.w"), vec![*inputs, *units]),
                (format!("{name}.b"), vec![*units]),
            ],
        }
    }
}

/// Layers of the classification head, in forward order.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadLayer {
    BatchNorm(String),
    Dropout(f64),
    Dense(String),
    Swish,
}

impl ArchSpec {
    /// Structural checks: stage fields, Conv first and last, positive classes.
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least a stem and a final conv stage".into(),
            ));
        }
        for s in &self.stages {
            s.validate()?;
        }
        if self.stages[0].operator != Operator::Conv || self.stages.last().map(|s| s.operator) != Some(Operator::Conv) {
            return Err(Error::InvalidArgument(
                "stage list must begin and end with a Conv stage".into(),
            ));
        }
        if self.head.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {}",
                self.head.num_classes
            )));
        }
        if self.input_resolution == 0 {
            return Err(Error::InvalidArgument("input resolution must be positive".into()));
        }
        Ok(())
    }

    /// True when the input resolution is the variant's tabulated one.
    pub fn is_standard_resolution(&self) -> bool {
        self.input_resolution == self.variant.resolution()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    /// Channels of the last backbone feature map.
    pub fn feature_channels(&self) -> usize {
        self.stages.last().expect("validated").out_channels
    }

    /// Spatial size of the last backbone feature map.
    pub fn feature_resolution(&self) -> usize {
        self.blocks()
            .last()
            .map(|b| match b {
                Block::ConvBnAct { out_res, .. } => *out_res,
                Block::MBConv(m) => m.out_res,
            })
            .unwrap_or(self.input_resolution)
    }

    /// Expands stages into blocks. Spatial sizes follow from
    /// `input_resolution` with same padding.
    pub fn blocks(&self) -> Vec<Block> {
        let mut blocks = Vec::new();
        let mut channels = 3;
        let mut res = self.input_resolution;
        for (si, stage) in self.stages.iter().enumerate() {
            for j in 0..stage.repeats {
                let stride = if j == 0 { stage.stride } else { 1 };
                let out_res = res.div_ceil(stride);
                let prefix = format!("stage{}.block{}", si + 1, j);
                match stage.operator {
                    Operator::Conv => blocks.push(Block::ConvBnAct {
                        prefix,
                        kernel: stage.kernel,
                        in_channels: channels,
                        out_channels: stage.out_channels,
                        stride,
                        in_res: res,
                        out_res,
                    }),
                    Operator::MBConv => blocks.push(Block::MBConv(MbConvBlock {
                        prefix,
                        in_channels: channels,
                        out_channels: stage.out_channels,
                        expansion: stage.expansion,
                        kernel: stage.kernel,
                        stride,
                        in_res: res,
                        out_res,
                        se_channels: self.include_se.then(|| ((channels as f64 * SE_RATIO) as usize).max(1)),
                    })),
                }
                channels = stage.out_channels;
                res = out_res;
            }
        }
        blocks
    }

    /// Stage index (1-based) of the first head stage.
    pub fn head_stage(&self) -> usize {
        self.stages.len() + 1
    }

    /// Head layers in forward order (after global average pooling).
    pub fn head_layers(&self) -> Vec<HeadLayer> {
        let s = self.head_stage();
        match self.top {
            Top::ImageNet => vec![
                HeadLayer::Dropout(self.variant.top_dropout()),
                HeadLayer::Dense(format!("stage{}.block0.fc", s - 1)),
            ],
            Top::Proposed => vec![
                HeadLayer::BatchNorm(format!("stage{s}.block0.bn")),
                HeadLayer::Dropout(self.head.pooled_dropout),
                HeadLayer::Dense(format!("stage{}.block0.fc", s + 1)),
                HeadLayer::BatchNorm(format!("stage{}.block0.bn", s + 1)),
                HeadLayer::Swish,
                HeadLayer::Dropout(self.head.hidden_dropout),
                HeadLayer::Dense(format!("stage{}.block0.fc", s + 2)),
                HeadLayer::BatchNorm(format!("stage{}.block0.bn", s + 2)),
                HeadLayer::Swish,
                HeadLayer::Dense(format!("stage{}.block0.fc", s + 3)),
            ],
        }
    }

    /// Every parameter-bearing layer in forward order.
    pub fn layers(&self) -> Vec<LayerDesc> {
        let mut out = Vec::new();
        for block in self.blocks() {
            match block {
                Block::ConvBnAct {
                    prefix,
                    kernel,
                    in_channels,
                    out_channels,
                    out_res,
                    ..
                } => {
                    out.push(LayerDesc::Conv {
                        name: format!("{prefix}.conv"),
                        kernel,
                        in_channels,
                        out_channels,
                        out_res,
                    });
                    out.push(LayerDesc::BatchNorm {
                        name: format!("{prefix}.bn"),
                        channels: out_channels,
                        positions: out_res * out_res,
                    });
                }
                Block::MBConv(m) => {
                    let p = &m.prefix;
                    let e = m.expanded();
                    if m.expansion != 1 {
                        out.push(LayerDesc::Conv {
                            name: format!("{p}.expand"),
                            kernel: 1,
                            in_channels: m.in_channels,
                            out_channels: e,
                            out_res: m.in_res,
                        });
                        out.push(LayerDesc::BatchNorm {
                            name: format!("{p}.expand_bn"),
                            channels: e,
                            positions: m.in_res * m.in_res,
                        });
                    }
                    out.push(LayerDesc::Depthwise {
                        name: format!("{p}.dw"),
                        kernel: m.kernel,
                        channels: e,
                        out_res: m.out_res,
                    });
                    out.push(LayerDesc::BatchNorm {
                        name: format!("{p}.dw_bn"),
                        channels: e,
                        positions: m.out_res * m.out_res,
                    });
                    if let Some(se) = m.se_channels {
                        out.push(LayerDesc::Dense {
                            name: format!("{p}.se_reduce"),
                            inputs: e,
                            units: se,
                        });
                        out.push(LayerDesc::Dense {
                            name: format!("{p}.se_expand"),
                            inputs: se,
                            units: e,
                        });
                    }
                    out.push(LayerDesc::Conv {
                        name: format!("{p}.project"),
                        kernel: 1,
                        in_channels: e,
                        out_channels: m.out_channels,
                        out_res: m.out_res,
                    });
                    out.push(LayerDesc::BatchNorm {
                        name: format!("{p}.project_bn"),
                        channels: m.out_channels,
                        positions: m.out_res * m.out_res,
                    });
                }
            }
        }
        let mut width = self.feature_channels();
        let nc = self.head.num_classes;
        let head = self.head_layers();
        let dense_count = head.iter().filter(|l| matches!(l, HeadLayer::Dense(_))).count();
        let mut dense_seen = 0;
        for layer in head {
            match layer {
                HeadLayer::BatchNorm(name) => out.push(LayerDesc::BatchNorm {
                    name,
                    channels: width,
                    positions: 1,
                }),
                HeadLayer::Dense(name) => {
                    dense_seen += 1;
                    let units = if dense_seen == dense_count {
                        nc
                    } else if dense_seen == 1 {
                        HEAD_FC1_UNITS
                    } else {
                        HEAD_FC2_UNITS
                    };
                    out.push(LayerDesc::Dense {
                        name,
                        inputs: width,
                        units,
                    });
                    width = units;
                }
                HeadLayer::Dropout(_) | HeadLayer::Swish => {}
            }
        }
        out
    }
}
