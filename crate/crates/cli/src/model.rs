//! Model directories: `arch.txt` + `weights.bin` for a flat model, the same
//! pair under `root/` and `leaf/` for a hierarchical one.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cxrnet::arch::text::{parse_text, to_text};
use cxrnet::arch::CostReport;
use cxrnet::classify::{HierModel, Network};
use cxrnet::weights::{self, WeightFile};

pub enum Model {
    Flat(Network),
    Hier { root: Network, leaf: Network },
}

impl Model {
    pub fn mode_name(&self) -> &'static str {
        match self {
            Model::Flat(_) => "flat",
            Model::Hier { .. } => "hier",
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            Model::Flat(n) => n.input_resolution(),
            Model::Hier { root, .. } => root.input_resolution(),
        }
    }

    /// Footprint of everything that has to be deployed; both sub-models for
    /// a hierarchical model.
    pub fn cost(&self) -> CostReport {
        match self {
            Model::Flat(n) => CostReport::for_spec(&n.spec),
            Model::Hier { root, leaf } => {
                add_costs(&CostReport::for_spec(&root.spec), &CostReport::for_spec(&leaf.spec))
            }
        }
    }

    pub fn into_hier(self) -> Result<HierModel> {
        match self {
            Model::Hier { root, leaf } => Ok(HierModel::new(Box::new(root), Box::new(leaf))?),
            Model::Flat(_) => bail!("not a hierarchical model"),
        }
    }
}

pub fn add_costs(a: &CostReport, b: &CostReport) -> CostReport {
    CostReport {
        param_count: a.param_count + b.param_count,
        mac_count: a.mac_count + b.mac_count,
        memory_bytes: a.memory_bytes + b.memory_bytes,
        elementwise_ops: a.elementwise_ops + b.elementwise_ops,
    }
}

pub fn save_network(net: &Network, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("arch.txt"), to_text(&net.spec))?;
    weights::save(&net.params).write(dir.join("weights.bin"))?;
    Ok(())
}

pub fn load_network(dir: &Path) -> Result<Network> {
    let arch = dir.join("arch.txt");
    let text = std::fs::read_to_string(&arch).with_context(|| format!("reading {}", arch.display()))?;
    let spec = parse_text(&text).with_context(|| format!("parsing {}", arch.display()))?;
    let file = WeightFile::read(dir.join("weights.bin"))?;
    let params = weights::load(&file, &spec).with_context(|| format!("loading weights in {}", dir.display()))?;
    Ok(Network::new(spec, params)?)
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    match model {
        Model::Flat(n) => save_network(n, dir),
        Model::Hier { root, leaf } => {
            save_network(root, &dir.join("root"))?;
            save_network(leaf, &dir.join("leaf"))
        }
    }
}

pub fn is_hier(dir: &Path) -> bool {
    dir.join("root").is_dir() && dir.join("leaf").is_dir()
}

pub fn load(dir: &Path) -> Result<Model> {
    if !dir.is_dir() {
        bail!("model directory {} does not exist", dir.display());
    }
    if is_hier(dir) {
        Ok(Model::Hier {
            root: load_network(&dir.join("root"))?,
            leaf: load_network(&dir.join("leaf"))?,
        })
    } else {
        Ok(Model::Flat(load_network(dir)?))
    }
}

/// Architecture files a model directory carries, keyed by sub-model.
pub fn arch_files(dir: &Path) -> Vec<(&'static str, PathBuf)> {
    if is_hier(dir) {
        vec![("root", dir.join("root/arch.txt")), ("leaf", dir.join("leaf/arch.txt"))]
    } else {
        vec![("flat", dir.join("arch.txt"))]
    }
}
