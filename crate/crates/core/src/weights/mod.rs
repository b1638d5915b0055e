//! Parameter storage, deterministic initialization, the on-disk weight
//! format and transfer-learning plans.
//!
//! Tensor names follow `stage{i}.block{j}.{role}.{tensor}`, e.g.
//! `stage4.block1.dw.w` or `stage11.block0.bn.gamma`. Roles are `conv`,
//! `bn`, `expand`, `expand_bn`, `dw`, `dw_bn`, `se_reduce`, `se_expand`,
//! `project`, `project_bn` and `fc`; tensors are `w`, `b`, `gamma`, `beta`,
//! `mean`, `var`. Conv weights are `(kh, kw, c_in, c_out)`, depthwise
//! `(kh, kw, c, 1)`, dense `(inputs, units)`.

pub mod file;
pub mod transfer;

use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchSpec, LayerDesc};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use file::{load, save, WeightFile};
pub use transfer::{apply_transfer, TransferPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors in forward order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> u64 {
        self.entries.values().map(|p| p.value.len() as u64).sum()
    }

    /// Whether a layer (e.g. `stage3.block0.dw`) is trainable; taken from its
    /// first stored tensor.
    pub fn layer_trainable(&self, layer: &str) -> bool {
        let prefix = format!("{layer}.");
        self.entries
            .iter()
            .find(|(k, _)| k.starts_with(&prefix))
            .map(|(_, p)| p.trainable)
            .unwrap_or(false)
    }

    /// Sets the trainable flag on every tensor of a layer.
    pub fn set_layer_trainable(&mut self, layer: &str, trainable: bool) {
        let prefix = format!("{layer}.");
        for (k, p) in self.entries.iter_mut() {
            if k.starts_with(&prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries.values_mut().for_each(|p| p.trainable = trainable);
    }

    /// Checks that the store holds exactly the tensors `spec` needs.
    pub fn validate_against(&self, spec: &ArchSpec) -> Result<()> {
        let mut expected = 0;
        for layer in spec.layers() {
            for (name, shape) in layer.tensors() {
                let p = self.get(&name)?;
                if p.value.shape() != shape.as_slice() {
                    return Err(Error::DimMismatch {
                        name,
                        expected: shape,
                        found: p.value.shape().to_vec(),
                    });
                }
                expected += 1;
            }
        }
        if expected != self.len() {
            return Err(Error::Format(format!(
                "store has {} tensors, architecture needs {expected}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-tensor RNG so a layer's init depends only on `(seed, name)`.
fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name))
}

fn uniform(shape: Vec<usize>, limit: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-limit, limit);
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape from spec")
}

/// Fresh tensors for one layer.
pub fn init_layer(layer: &LayerDesc, seed: u64) -> Vec<(String, Tensor)> {
    let tensors = layer.tensors();
    match *layer {
        LayerDesc::Conv {
            kernel,
            in_channels,
            out_channels,
            ..
        } => {
            let (name, shape) = tensors.into_iter().next().expect("one tensor");
            let lim = glorot_limit(kernel * kernel * in_channels, kernel * kernel * out_channels);
            let mut rng = tensor_rng(seed, &name);
            vec![(name, uniform(shape, lim, &mut rng))]
        }
        LayerDesc::Depthwise { kernel, .. } => {
            let (name, shape) = tensors.into_iter().next().expect("one tensor");
            let lim = glorot_limit(kernel * kernel, kernel * kernel);
            let mut rng = tensor_rng(seed, &name);
            vec![(name, uniform(shape, lim, &mut rng))]
        }
        LayerDesc::Dense { inputs, units, .. } => {
            let mut it = tensors.into_iter();
            let (wn, ws) = it.next().expect("weight");
            let (bn, bs) = it.next().expect("bias");
            let mut rng = tensor_rng(seed, &wn);
            vec![
                (wn, uniform(ws, glorot_limit(inputs, units), &mut rng)),
                (bn, Tensor::zeros(&bs)),
            ]
        }
        LayerDesc::BatchNorm { .. } => tensors
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gamma") || name.ends_with(".var") {
                    Tensor::ones(&shape)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect(),
    }
}

/// Deterministic initialization of every layer of `spec`; all trainable.
pub fn init(spec: &ArchSpec, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    for layer in spec.layers() {
        for (name, t) in init_layer(&layer, seed) {
            store.insert(name, t, true);
        }
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_arch, build_reduced, count_params, Variant};

    #[test]
    fn bn_init_convention() {
        let spec = build_reduced(0.25, 32, 3, true).unwrap();
        let store = init(&spec, 1);
        for (name, p) in store.iter() {
            if name.ends_with(".gamma") {
                assert!(p.value.data().iter().all(|&v| v == 1.0));
            }
            if name.ends_with(".beta") {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = build_reduced(0.25, 32, 3, true).unwrap();
        assert_eq!(init(&spec, 7), init(&spec, 7));
        assert_ne!(init(&spec, 7), init(&spec, 8));
    }

    #[test]
    fn dense_512_within_glorot_bound() {
        let spec = build_arch(Variant::B0, 3, true).unwrap();
        let store = init(&spec, 3);
        let w = store.tensor("stage11.block0.fc.w").unwrap();
        assert_eq!(w.shape(), &[1280, 512]);
        let bound = (6.0f32 / (1280.0 + 512.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.max_abs() > 0.9 * bound);
    }

    #[test]
    fn store_size_matches_param_count() {
        let spec = build_arch(Variant::B0, 3, true).unwrap();
        let store = init(&spec, 0);
        assert_eq!(store.scalar_count(), count_params(&spec));
        store.validate_against(&spec).unwrap();
    }
}
