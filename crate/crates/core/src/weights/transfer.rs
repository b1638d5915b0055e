//! Transfer learning: copy selected layers from a source file, initialize
//! the rest, and record which layers train.

use std::collections::HashMap;

use indexmap::IndexMap;

use super::{ParamStore, WeightFile};
use crate::arch::{ArchSpec, LayerDesc};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransferPlan {
    /// `(source layer, target layer)` pairs.
    pub name_map: Vec<(String, String)>,
    /// Target layers that keep their fresh initialization.
    pub new_layers: Vec<String>,
    /// Per target layer; layers not listed are trainable.
    pub trainable_mask: IndexMap<String, bool>,
}

fn backbone_layers(spec: &ArchSpec) -> Vec<LayerDesc> {
    let head_prefixes: Vec<String> = spec
        .head_layers()
        .iter()
        .filter_map(|h| match h {
            crate::arch::HeadLayer::BatchNorm(n) | crate::arch::HeadLayer::Dense(n) => Some(n.clone()),
            _ => None,
        })
        .collect();
    spec.layers()
        .into_iter()
        .filter(|l| !head_prefixes.iter().any(|h| h == l.name()))
        .collect()
}

impl TransferPlan {
    /// Every layer initialized fresh.
    pub fn fresh(target: &ArchSpec) -> Self {
        Self {
            new_layers: target.layers().iter().map(|l| l.name().to_string()).collect(),
            ..Self::default()
        }
    }

    /// Every layer copied under the same name.
    pub fn full(target: &ArchSpec) -> Self {
        Self {
            name_map: target
                .layers()
                .iter()
                .map(|l| (l.name().to_string(), l.name().to_string()))
                .collect(),
            ..Self::default()
        }
    }

    /// Backbone copied under the same names; classifier head fresh.
    pub fn backbone(target: &ArchSpec) -> Self {
        let backbone: Vec<String> = backbone_layers(target).iter().map(|l| l.name().to_string()).collect();
        let new_layers = target
            .layers()
            .iter()
            .map(|l| l.name().to_string())
            .filter(|n| !backbone.contains(n))
            .collect();
        Self {
            name_map: backbone.into_iter().map(|n| (n.clone(), n)).collect(),
            new_layers,
            ..Self::default()
        }
    }

    /// Sets the same trainable flag on every target layer.
    pub fn with_all_trainable(mut self, target: &ArchSpec, trainable: bool) -> Self {
        self.trainable_mask = target
            .layers()
            .iter()
            .map(|l| (l.name().to_string(), trainable))
            .collect();
        self
    }

    /// Freezes every mapped layer; new layers train.
    pub fn freeze_mapped(mut self) -> Self {
        for (_, t) in &self.name_map {
            self.trainable_mask.insert(t.clone(), false);
        }
        self
    }

    pub fn is_trainable(&self, layer: &str) -> bool {
        self.trainable_mask.get(layer).copied().unwrap_or(true)
    }

    /// Every target layer covered exactly once; no unknown names.
    pub fn validate(&self, target: &ArchSpec) -> Result<()> {
        let mut cover: HashMap<String, usize> = target.layers().iter().map(|l| (l.name().to_string(), 0)).collect();
        let targets = self.name_map.iter().map(|(_, t)| t).chain(&self.new_layers);
        for t in targets {
            match cover.get_mut(t) {
                Some(c) => *c += 1,
                None => return Err(Error::Transfer(format!("`{t}` is not a layer of the target"))),
            }
        }
        for l in target.layers() {
            match cover[l.name()] {
                0 => return Err(Error::Transfer(format!("target layer `{}` is unmapped", l.name()))),
                1 => {}
                n => {
                    return Err(Error::Transfer(format!(
                        "target layer `{}` is covered {n} times",
                        l.name()
                    )))
                }
            }
        }
        for k in self.trainable_mask.keys() {
            if !cover.contains_key(k) {
                return Err(Error::Transfer(format!("mask names unknown layer `{k}`")));
            }
        }
        Ok(())
    }
}

/// Applies `plan` to a freshly initialized `store` for `target`, copying
/// mapped layers out of `source`.
pub fn apply_transfer(
    plan: &TransferPlan,
    source: &WeightFile,
    target: &ArchSpec,
    mut store: ParamStore,
) -> Result<ParamStore> {
    plan.validate(target)?;
    let layers: HashMap<String, LayerDesc> = target.layers().into_iter().map(|l| (l.name().to_string(), l)).collect();
    for (src, dst) in &plan.name_map {
        let layer = &layers[dst];
        for (name, shape) in layer.tensors() {
            let suffix = &name[dst.len()..];
            let src_name = format!("{src}{suffix}");
            let t = source
                .get(&src_name)
                .ok_or_else(|| Error::Transfer(format!("source has no `{src_name}` for `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::DimMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            store.get_mut(&name)?.value = t.clone();
        }
    }
    for name in layers.keys() {
        store.set_layer_trainable(name, plan.is_trainable(name));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_arch_with_top, build_reduced, Top, Variant};
    use crate::weights::{file::save, init};

    #[test]
    fn all_new_equals_init() {
        let spec = build_reduced(0.25, 32, 3, true).unwrap();
        let src = save(&init(&spec, 99));
        let out = apply_transfer(&TransferPlan::fresh(&spec), &src, &spec, init(&spec, 4)).unwrap();
        assert_eq!(out, init(&spec, 4));
    }

    #[test]
    fn backbone_copied_head_fresh() {
        // Source carries the stock top; target carries the custom head.
        let src_spec = build_arch_with_top(Variant::B0, 1000, true, Top::ImageNet).unwrap();
        let dst_spec = build_arch_with_top(Variant::B0, 3, true, Top::Proposed).unwrap();
        let src = save(&init(&src_spec, 11));
        let plan = TransferPlan::backbone(&dst_spec);
        let fresh = init(&dst_spec, 12);
        let out = apply_transfer(&plan, &src, &dst_spec, fresh.clone()).unwrap();
        let head: Vec<&str> = plan.new_layers.iter().map(String::as_str).collect();
        assert_eq!(head.len(), 6);
        for (name, p) in out.iter() {
            let layer = &name[..name.rfind('.').unwrap()];
            if head.contains(&layer) {
                assert_eq!(&p.value, fresh.tensor(name).unwrap(), "{name}");
                assert!(src.get(name).is_none_or(|t| t != &p.value), "{name}");
            } else {
                assert_eq!(&p.value, src.get(name).unwrap(), "{name}");
            }
        }
        assert_eq!(out.tensor("stage13.block0.fc.w").unwrap().shape(), [128, 3]);
    }

    #[test]
    fn unmapped_and_double_mapped_rejected() {
        let spec = build_reduced(0.25, 32, 3, true).unwrap();
        let src = save(&init(&spec, 1));
        let mut plan = TransferPlan::fresh(&spec);
        plan.new_layers.pop();
        assert!(matches!(
            apply_transfer(&plan, &src, &spec, init(&spec, 1)),
            Err(Error::Transfer(_))
        ));
        let mut plan = TransferPlan::full(&spec);
        plan.new_layers.push(plan.name_map[0].1.clone());
        assert!(plan.validate(&spec).is_err());
    }

    #[test]
    fn shape_conflict_rejected() {
        let a = build_reduced(0.25, 32, 3, true).unwrap();
        let b = build_reduced(0.5, 32, 3, true).unwrap();
        let src = save(&init(&a, 1));
        let r = apply_transfer(&TransferPlan::full(&b), &src, &b, init(&b, 1));
        assert!(matches!(r, Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn mask_recorded() {
        let spec = build_reduced(0.25, 32, 3, true).unwrap();
        let src = save(&init(&spec, 1));
        let plan = TransferPlan::full(&spec).with_all_trainable(&spec, false);
        let out = apply_transfer(&plan, &src, &spec, init(&spec, 2)).unwrap();
        assert!(out.iter().all(|(_, p)| !p.trainable));
        let plan = TransferPlan::backbone(&spec).freeze_mapped();
        let out = apply_transfer(&plan, &src, &spec, init(&spec, 2)).unwrap();
        assert!(!out.layer_trainable("stage1.block0.conv"));
        assert!(out.layer_trainable(&format!("stage{}.block0.fc", spec.head_stage() + 3)));
    }
}
