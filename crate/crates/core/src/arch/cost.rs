//! Parameter, MAC and memory accounting.
//!
//! Per-layer conventions (one MAC = one multiply plus one add):
//!
//! | layer                        | params              | MACs                       |
//! |------------------------------|---------------------|----------------------------|
//! | conv k×k, c_in→c_out         | k²·c_in·c_out       | H_out·W_out·k²·c_in·c_out  |
//! | depthwise k×k, c             | k²·c                | H_out·W_out·k²·c           |
//! | dense n→m (with bias)        | n·m + m             | n·m                        |
//! | batch norm, c channels       | 4·c                 | 0 (elementwise)            |
//!
//! Batch norm counts scale, shift and both running statistics, matching how
//! pre-trained checkpoints report their totals. Activations, BN, pooling, SE
//! gating and residual adds are tallied separately as elementwise ops.

use super::{ArchSpec, Block, LayerDesc};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub param_count: u64,
    pub mac_count: u64,
    pub memory_bytes: u64,
    pub elementwise_ops: u64,
}

impl CostReport {
    pub fn for_spec(spec: &ArchSpec) -> Self {
        let param_count = count_params(spec);
        Self {
            param_count,
            mac_count: count_macs(spec),
            memory_bytes: estimate_memory(param_count),
            elementwise_ops: count_elementwise(spec),
        }
    }

    pub fn memory_mib(&self) -> f64 {
        self.memory_bytes as f64 / MIB as f64
    }

    /// Memory in mebibytes rounded up.
    pub fn memory_mib_ceil(&self) -> u64 {
        self.memory_bytes.div_ceil(MIB)
    }
}

const MIB: u64 = 1 << 20;

pub fn layer_params(layer: &LayerDesc) -> u64 {
    match *layer {
        LayerDesc::Conv {
            kernel,
            in_channels,
            out_channels,
            ..
        } => (kernel * kernel * in_channels * out_channels) as u64,
        LayerDesc::Depthwise { kernel, channels, .. } => (kernel * kernel * channels) as u64,
        LayerDesc::BatchNorm { channels, .. } => 4 * channels as u64,
        LayerDesc::Dense { inputs, units, .. } => (inputs * units + units) as u64,
    }
}

pub fn layer_macs(layer: &LayerDesc) -> u64 {
    match *layer {
        LayerDesc::Conv {
            kernel,
            in_channels,
            out_channels,
            out_res,
            ..
        } => (out_res * out_res * kernel * kernel * in_channels * out_channels) as u64,
        LayerDesc::Depthwise {
            kernel,
            channels,
            out_res,
            ..
        } => (out_res * out_res * kernel * kernel * channels) as u64,
        LayerDesc::BatchNorm { .. } => 0,
        LayerDesc::Dense { inputs, units, .. } => (inputs * units) as u64,
    }
}

pub fn count_params(spec: &ArchSpec) -> u64 {
    spec.layers().iter().map(layer_params).sum()
}

pub fn count_macs(spec: &ArchSpec) -> u64 {
    spec.layers().iter().map(layer_macs).sum()
}

/// Four bytes per parameter.
pub fn estimate_memory(param_count: u64) -> u64 {
    4 * param_count
}

/// Elements touched by BN, activations, pooling, SE gating and residual adds.
pub fn count_elementwise(spec: &ArchSpec) -> u64 {
    let mut ops = 0u64;
    for layer in spec.layers() {
        if let LayerDesc::BatchNorm {
            channels, positions, ..
        } = layer
        {
            // BN and, for all but the projection BN, its activation.
            ops += 2 * (channels * positions) as u64;
        }
    }
    for block in spec.blocks() {
        if let Block::MBConv(m) = block {
            let e = m.expanded() as u64;
            let out_px = (m.out_res * m.out_res) as u64;
            if m.se_channels.is_some() {
                ops += 2 * e * out_px;
            }
            if m.has_residual() {
                ops += m.out_channels as u64 * out_px;
            }
        }
    }
    let f = spec.feature_resolution() as u64;
    ops + f * f * spec.feature_channels() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_arch, build_arch_with_top, Top, Variant};

    #[test]
    fn single_layer_counts() {
        let d = LayerDesc::Dense {
            name: "fc".into(),
            inputs: 2,
            units: 3,
        };
        assert_eq!(layer_params(&d), 9);
        assert_eq!(layer_macs(&d), 6);
        let c = LayerDesc::Conv {
            name: "c".into(),
            kernel: 3,
            in_channels: 1,
            out_channels: 1,
            out_res: 2,
        };
        assert_eq!(layer_macs(&c), 4 * 9);
    }

    #[test]
    fn memory_is_four_bytes_per_param() {
        assert_eq!(estimate_memory(0), 0);
        for v in Variant::ALL {
            let r = CostReport::for_spec(&build_arch(v, 3, true).unwrap());
            assert_eq!(r.memory_bytes, 4 * r.param_count);
        }
    }

    #[test]
    fn monotone_across_variants() {
        let reports: Vec<CostReport> = Variant::ALL
            .iter()
            .map(|&v| CostReport::for_spec(&build_arch_with_top(v, 1000, true, Top::ImageNet).unwrap()))
            .collect();
        for w in reports.windows(2) {
            assert!(w[0].param_count <= w[1].param_count);
            assert!(w[0].mac_count <= w[1].mac_count);
        }
    }
}
