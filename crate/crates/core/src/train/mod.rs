//! Training loop: softmax cross-entropy, Adam, reduce-on-plateau.

pub mod optim;
pub mod schedule;

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classify::{argmax, Network};
use crate::data::{load_entry, LabelSpace, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Mode, Tensor};

pub use crate::tensor::graph::cross_entropy;
pub use optim::AdamState;
pub use schedule::{lr_trace, PlateauSchedule};

/// Labelled images at one resolution.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn resolution(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    /// Image `i` as `(r, r, 3)` in `[0, 1]`.
    fn image(&self, i: usize) -> Result<Tensor>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks the given images into `(n, r, r, 3)`.
    fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let r = self.resolution();
        let imgs: Vec<Tensor> = indices.par_iter().map(|&i| self.image(i)).collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(indices.len() * r * r * 3);
        for (img, &i) in imgs.iter().zip(indices) {
            if img.shape() != [r, r, 3] {
                return Err(Error::shape(
                    "dataset",
                    format!("image {i}"),
                    format!("[{r}, {r}, 3]"),
                    format!("{:?}", img.shape()),
                ));
            }
            data.extend_from_slice(img.data());
        }
        Tensor::new(vec![indices.len(), r, r, 3], data)
    }
}

pub struct InMemoryDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub resolution: usize,
}

impl InMemoryDataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape("dataset", "labels", images.len(), labels.len()));
        }
        let resolution = images.first().map(|t| t.shape()[0]).unwrap_or(0);
        Ok(Self {
            images,
            labels,
            resolution,
        })
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn resolution(&self) -> usize {
        self.resolution
    }
    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
    fn image(&self, i: usize) -> Result<Tensor> {
        Ok(self.images[i].clone())
    }
}

/// Images read lazily from a manifest; entries with no index in the label
/// space (Normal, for a leaf model) are skipped.
pub struct ManifestDataset {
    entries: Vec<(ManifestEntry, usize)>,
    root: Option<PathBuf>,
    resolution: usize,
}

impl ManifestDataset {
    pub fn new(manifest: &Manifest, root: Option<PathBuf>, resolution: usize, space: LabelSpace) -> Self {
        let entries = manifest
            .iter()
            .filter_map(|e| space.index(e.label).map(|i| (e.clone(), i)))
            .collect();
        Self {
            entries,
            root,
            resolution,
        }
    }

    pub fn entry(&self, i: usize) -> &ManifestEntry {
        &self.entries[i].0
    }
}

impl Dataset for ManifestDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }
    fn resolution(&self) -> usize {
        self.resolution
    }
    fn label(&self, i: usize) -> usize {
        self.entries[i].1
    }
    fn image(&self, i: usize) -> Result<Tensor> {
        Ok(load_entry(&self.entries[i].0, self.root.as_deref(), self.resolution)?.pixels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub lr_factor: f64,
    pub min_delta: f64,
    pub seed: u64,
    /// Re-estimate BN running statistics over the training set once training
    /// ends.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-4,
            patience: 2,
            lr_factor: 10.0,
            min_delta: 1e-4,
            seed: 0,
            recalibrate_bn: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 || !(self.lr_factor > 1.0) {
            return Err(Error::InvalidArgument(format!("invalid training config: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Rate used during the epoch.
    pub lr: f64,
    /// Fraction of training samples classified correctly as they were seen.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn lrs(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    /// `epoch,loss,lr`, one row per epoch.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("epoch,loss,lr\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.6},{:e}", e.epoch, e.loss, e.lr);
        }
        s
    }
}

/// Epoch batches under a seeded shuffle. A trailing batch of one sample is
/// dropped: batch statistics over a single sample are degenerate.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64).wrapping_mul(0xa076_1d64_78bd_642f),
    ));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if n > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
    }
    batches
}

/// Trains `net` in place for exactly `config.epochs` epochs, calling
/// `on_epoch` after each one.
pub fn train_with(
    net: &mut Network,
    data: &dyn Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if data.resolution() != net.input_resolution() {
        return Err(Error::ResolutionMismatch {
            expected: net.input_resolution(),
            found: data.resolution(),
        });
    }
    if let Some(bad) = (0..data.len()).find(|&i| data.label(i) >= net.num_classes()) {
        return Err(Error::InvalidArgument(format!(
            "sample {bad} has label {} >= {} classes",
            data.label(bad),
            net.num_classes()
        )));
    }
    let mut adam = AdamState::default();
    let mut sched = PlateauSchedule::new(
        config.learning_rate,
        config.lr_factor,
        config.patience,
        config.min_delta,
    );
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let lr = sched.lr;
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        let batches = epoch_batches(data.len(), config.batch_size, config.seed, epoch);
        for (step, batch) in batches.iter().enumerate() {
            let x = data.batch(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let step_seed = config.seed ^ ((epoch as u64) << 32 | step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let fwd = net.forward(&mut g, xv, Mode::Train, step_seed)?;
            let loss = g.softmax_cross_entropy(fwd.logits, &labels)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, step });
            }
            let k = net.num_classes();
            correct += g
                .value(fwd.logits)
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            seen += labels.len();
            loss_sum += lv as f64;
            if !fwd.trainable.is_empty() {
                let mut grads = g.backward(loss)?;
                let named: Vec<(String, Tensor)> = fwd
                    .trainable
                    .iter()
                    .filter_map(|(n, v)| grads.take(*v).map(|t| (n.clone(), t)))
                    .collect();
                adam.step(&mut net.params, &named, lr as f32)?;
            }
            net.update_bn_stats(&fwd.bn_moments)?;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / batches.len().max(1) as f64,
            lr,
            accuracy: correct as f64 / seen.max(1) as f64,
        };
        sched.observe(rec.loss);
        on_epoch(&rec);
        report.epochs.push(rec);
    }
    if config.recalibrate_bn {
        let batches = epoch_batches(data.len(), config.batch_size, config.seed, config.epochs);
        net.recalibrate_bn(batches.iter().map(|b| data.batch(b)))?;
    }
    Ok(report)
}

pub fn train(net: &mut Network, data: &dyn Dataset, config: &TrainConfig) -> Result<TrainReport> {
    train_with(net, data, config, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_reduced;

    fn tiny_set(n: usize) -> InMemoryDataset {
        let images = (0..n)
            .map(|i| Tensor::full(&[32, 32, 3], (i % 3) as f32 / 2.0))
            .collect();
        InMemoryDataset::new(images, (0..n).map(|i| i % 3).collect()).unwrap()
    }

    #[test]
    fn frozen_network_is_unchanged() {
        let mut net = Network::init(build_reduced(0.25, 32, 3, true).unwrap(), 0);
        net.params.set_all_trainable(false);
        let before = net.params.clone();
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let rep = train(&mut net, &tiny_set(9), &cfg).unwrap();
        assert_eq!(rep.epochs.len(), 2);
        assert_eq!(net.params, before);
    }

    #[test]
    fn runs_exact_epochs_and_emits_trace() {
        let mut net = Network::init(build_reduced(0.25, 32, 3, true).unwrap(), 0);
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let rep = train(&mut net, &tiny_set(10), &cfg).unwrap();
        let csv = rep.trace_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("epoch,loss,lr\n1,"));
    }

    #[test]
    fn empty_and_mismatched_inputs_fail() {
        let mut net = Network::init(build_reduced(0.25, 32, 3, true).unwrap(), 0);
        let empty = InMemoryDataset::new(vec![], vec![]).unwrap();
        assert!(matches!(
            train(&mut net, &empty, &TrainConfig::default()),
            Err(Error::EmptyManifest)
        ));
        let big = InMemoryDataset::new(vec![Tensor::zeros(&[64, 64, 3])], vec![0]).unwrap();
        assert!(matches!(
            train(&mut net, &big, &TrainConfig::default()),
            Err(Error::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn singleton_tail_batch_dropped() {
        let b = epoch_batches(17, 8, 0, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [8, 8]);
        assert_eq!(epoch_batches(1, 8, 0, 0).len(), 1);
    }

    #[test]
    fn ce_values() {
        assert_eq!(cross_entropy(&[1.0f64, 0.0, 0.0], 0), 0.0);
        assert!((cross_entropy(&[1.0f64 / 3.0; 3], 1) - 3f64.ln()).abs() < 1e-12);
    }
}
