//! Trains the width-reduced network on the synthetic 3-class set and prints
//! the per-epoch trace.

use std::time::Instant;

use cxrnet::arch::build_reduced;
use cxrnet::classify::Network;
use cxrnet::data::synth::synth_set;
use cxrnet::eval::evaluate_flat;
use cxrnet::train::{train_with, InMemoryDataset, TrainConfig};

fn main() -> cxrnet::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let set = synth_set([100, 100, 100], 64, seed);
    let (images, labels) = set.into_iter().map(|(i, l)| (i.pixels, l as usize)).unzip();
    let data = InMemoryDataset::new(images, labels)?;
    let mut net = Network::init(build_reduced(0.25, 64, 3, true)?, seed);
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    train_with(&mut net, &data, &cfg, |e| {
        println!(
            "epoch {:>2}  loss {:.4}  acc {:.3}  lr {:e}  ({:.1}s)",
            e.epoch,
            e.loss,
            e.accuracy,
            e.lr,
            t0.elapsed().as_secs_f64()
        );
    })?;
    let ev = evaluate_flat(&net, &data)?;
    println!("inference-mode training accuracy: {}", ev.report.accuracy);
    Ok(())
}
