//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line
//! straight to stdout (past the test harness capture) before asserting.

use std::collections::HashSet;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write as _;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cxrnet::arch::text::{parse_text, to_text};
use cxrnet::arch::{build_arch, build_arch_with_top, build_reduced, CostReport, Operator, Top, Variant};
use cxrnet::classify::{predict_hier, Classifier, HierModel, Network, Prediction, Stage, StageOutput};
use cxrnet::data::covidx::{apply_config, build_covidx, CovidxTargets, DatasetConfig, DatasetMode};
use cxrnet::data::image::AugSpec;
use cxrnet::data::synth::{synth_set, write_corpus};
use cxrnet::data::{hierarchical_relabel, Label, LabelSpace, Level, Manifest, ManifestEntry, Partition, Source};
use cxrnet::eval::{
    confusion_from_predictions, evaluate_flat, evaluate_hier, ConfusionMatrix, MetricsReport, ROOT_MERGE,
};
use cxrnet::tensor::{check_gradients, Element, Graph, Mode, Padding, Probe, Tensor, Var};
use cxrnet::train::{lr_trace, train_with, Dataset, InMemoryDataset, ManifestDataset, TrainConfig};
use cxrnet::weights::{self, WeightFile};
use cxrnet::Result;

fn report(criterion: u32, ok: bool, what: &str, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {criterion}: {} {what} ({detail}; {:.2}s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}

// 1 ----------------------------------------------------------------------

#[test]
fn criterion_1_footprints() {
    const TABLE: [(Variant, u64, u64); 6] = [
        (Variant::B0, 5_330_564, 21),
        (Variant::B1, 7_856_232, 31),
        (Variant::B2, 9_177_562, 36),
        (Variant::B3, 12_320_528, 48),
        (Variant::B4, 19_466_816, 76),
        (Variant::B5, 30_562_520, 118),
    ];
    let t0 = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    for (v, params, mib) in TABLE {
        let spec = build_arch_with_top(v, 1000, true, Top::ImageNet).unwrap();
        let cost = CostReport::for_spec(&spec);
        let rel = (cost.param_count as f64 - params as f64).abs() / params as f64;
        let dmem = (cost.memory_mib() - mib as f64).abs();
        ok &= rel <= 0.002 && dmem <= 3.0 && cost.memory_bytes == 4 * cost.param_count;
        detail.push(format!(
            "{v} {} ({:+.3}%) {:.1}MiB",
            cost.param_count,
            100.0 * rel,
            cost.memory_mib()
        ));
    }
    let elapsed = t0.elapsed();
    ok &= elapsed < Duration::from_secs(1);
    report(1, ok, "footprints within 0.2% / 3 MiB", &detail.join(", "), elapsed);
    assert!(ok, "{detail:?}");
}

// 2 ----------------------------------------------------------------------

/// Predicts the class encoded in the first pixel of each image.
struct Lookup;

impl Classifier for Lookup {
    fn input_resolution(&self) -> usize {
        1
    }
    fn num_classes(&self) -> usize {
        3
    }
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let n = batch.shape()[0];
        let mut out = vec![0.0; n * 3];
        for i in 0..n {
            out[i * 3 + batch.data()[i * 3] as usize] = 5.0;
        }
        Tensor::new(vec![n, 3], out)
    }
}

#[test]
fn criterion_2_metric_oracle() {
    let t0 = Instant::now();
    let rows: [[usize; 3]; 3] = [[100, 0, 0], [13, 87, 0], [0, 1, 30]];
    let mut records: Vec<(usize, usize)> = Vec::new();
    for (t, row) in rows.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            records.extend(std::iter::repeat_n((t, p), n));
        }
    }
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(231));
    assert_eq!(records.len(), 231);

    let images = records
        .iter()
        .map(|&(_, p)| Tensor::full(&[1, 1, 3], p as f32))
        .collect();
    let data = InMemoryDataset::new(images, records.iter().map(|&(t, _)| t).collect()).unwrap();
    let ev = evaluate_flat(&Lookup, &data).unwrap();
    let m = &ev.report;
    let rendered = (
        m.accuracy.to_string(),
        m.covid_sensitivity.to_string(),
        m.covid_positive_prediction.to_string(),
    );

    // Brute-force recount straight off the records.
    let correct = records.iter().filter(|(t, p)| t == p).count();
    let tp_c = records.iter().filter(|&&(t, p)| t == 2 && p == 2).count();
    let actual_c = records.iter().filter(|&&(t, _)| t == 2).count();
    let called_c = records.iter().filter(|&&(_, p)| p == 2).count();
    let brute = (
        format!("{:.1}%", 100.0 * correct as f64 / 231.0),
        format!("{:.1}%", 100.0 * tp_c as f64 / actual_c as f64),
        format!("{:.1}%", 100.0 * tp_c as f64 / called_c as f64),
    );
    let oracle = ("93.9%".to_string(), "96.8%".to_string(), "100.0%".to_string());
    let from_matrix =
        MetricsReport::from_confusion(&ConfusionMatrix::from_rows(&[&[100, 0, 0], &[13, 87, 0], &[0, 1, 30]]).unwrap());

    let ok = rendered == oracle
        && brute == oracle
        && from_matrix == *m
        && ev.confusion.fn_c() == 1
        && ev.confusion.fp_c() == 0
        && m.samples == 231;
    let elapsed = t0.elapsed();
    report(
        2,
        ok && elapsed < Duration::from_secs(1),
        "metric oracle",
        &m.summary(),
        elapsed,
    );
    assert!(ok, "{rendered:?} / {brute:?}");
}

// 3 ----------------------------------------------------------------------

fn table_train_manifest() -> Manifest {
    let mut entries = Vec::new();
    for (label, n, src) in [
        (Label::Normal, 7966, Source::Rsna),
        (Label::Pneumonia, 5421, Source::Rsna),
        (Label::Covid19, 152, Source::CovidCollection),
    ] {
        for i in 0..n {
            entries.push(ManifestEntry::new(
                format!("{label}/{i}.png"),
                label,
                src,
                Partition::Train,
            ));
        }
    }
    Manifest::new(entries)
}

#[test]
fn criterion_3_dataset_configurations() {
    let t0 = Instant::now();
    let train = table_train_manifest();
    let aug = AugSpec::default();
    let counts = |mode| {
        apply_config(&train, &DatasetConfig::new(mode), &aug, 11)
            .unwrap()
            .counts()
    };
    let raw = counts(DatasetMode::Raw);
    let plus = counts(DatasetMode::RawPlusAug);
    let balanced = counts(DatasetMode::Balanced);
    let root = hierarchical_relabel(&train, Level::Root);
    let root_counts = (
        root.iter().filter(|e| e.label == Label::Normal).count(),
        root.iter().filter(|e| e.label == Label::Pneumonia).count(),
    );
    let ok = raw == [7966, 5421, 152]
        && plus == [4000, 4000, 1152]
        && balanced == [1000, 1000, 1000]
        && root_counts == (7966, 5573)
        && root.len() == train.len();
    let elapsed = t0.elapsed();
    let detail = format!("raw {raw:?}, raw+aug {plus:?}, balanced {balanced:?}, root {root_counts:?}");
    report(
        3,
        ok && elapsed < Duration::from_secs(5),
        "dataset configurations",
        &detail,
        elapsed,
    );
    assert!(ok, "{detail}");
}

// 4 ----------------------------------------------------------------------

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Contracts a tensor output against fixed random weights, so every output
/// element contributes to the probe with a different sign and size.
fn contract<T: Element>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = random(&shape, &mut ChaCha8Rng::seed_from_u64(seed), 1.0).cast::<T>();
    g.weighted_sum(y, w)
}

struct ConvProbe(usize);
impl Probe for ConvProbe {
    fn build<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let y = g.conv2d(p[0], p[1], self.0, Padding::Same)?;
        contract(g, y, 1)
    }
}

struct DepthwiseProbe(usize);
impl Probe for DepthwiseProbe {
    fn build<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let y = g.depthwise_conv2d(p[0], p[1], self.0, Padding::Same)?;
        contract(g, y, 2)
    }
}

struct DenseProbe;
impl Probe for DenseProbe {
    fn build<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let y = g.dense(p[0], p[1], Some(p[2]))?;
        contract(g, y, 3)
    }
}

struct BatchNormProbe;
impl Probe for BatchNormProbe {
    fn build<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let c = g.value(p[1]).len();
        let (mean, var) = (vec![T::zero(); c], vec![T::one(); c]);
        let (y, _) = g.batch_norm(p[0], p[1], p[2], (&mean, &var), Mode::Train, T::from_f64(1e-3))?;
        contract(g, y, 4)
    }
}

struct SwishProbe;
impl Probe for SwishProbe {
    fn build<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let y = g.swish(p[0]);
        contract(g, y, 5)
    }
}

struct SoftmaxCeProbe(Vec<usize>);
impl Probe for SoftmaxCeProbe {
    fn build<T: Element>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        g.softmax_cross_entropy(p[0], &self.0)
    }
}

#[test]
fn criterion_4_gradient_fidelity() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut r = |shape: &[usize], scale: f64| random(shape, &mut rng, scale);
    let bn_gamma = r(&[4], 1.0).map(|v| v + 1.5);
    let checks: Vec<(&str, Vec<Tensor<f64>>)> = vec![
        ("conv2d s1", vec![r(&[1, 4, 4, 2], 1.0), r(&[3, 3, 2, 3], 0.5)]),
        ("conv2d s2", vec![r(&[1, 5, 5, 2], 1.0), r(&[3, 3, 2, 2], 0.5)]),
        ("depthwise s1", vec![r(&[1, 5, 5, 3], 1.0), r(&[3, 3, 3, 1], 0.5)]),
        ("depthwise s2", vec![r(&[2, 5, 5, 2], 1.0), r(&[5, 5, 2, 1], 0.5)]),
        ("dense", vec![r(&[3, 6], 1.0), r(&[6, 5], 0.5), r(&[5], 0.5)]),
        ("batch_norm", vec![r(&[2, 3, 3, 4], 1.0), bn_gamma, r(&[4], 0.5)]),
        ("swish", vec![r(&[60], 4.0)]),
        ("softmax_ce", vec![r(&[4, 5], 2.0)]),
    ];
    let labels = vec![0, 3, 4, 1];

    let run = |name: &str, params: &[Tensor<f64>], wide: bool| -> f64 {
        let step = if wide { 1e-6 } else { 1e-4 };
        macro_rules! go {
            ($probe:expr) => {
                if wide {
                    check_gradients::<f64, _>(&$probe, params, step)
                } else {
                    check_gradients::<f32, _>(&$probe, params, step)
                }
            };
        }
        let rep = match name {
            "conv2d s1" => go!(ConvProbe(1)),
            "conv2d s2" => go!(ConvProbe(2)),
            "depthwise s1" => go!(DepthwiseProbe(1)),
            "depthwise s2" => go!(DepthwiseProbe(2)),
            "dense" => go!(DenseProbe),
            "batch_norm" => go!(BatchNormProbe),
            "swish" => go!(SwishProbe),
            _ => go!(SoftmaxCeProbe(labels.clone())),
        };
        rep.unwrap().max_rel_error
    };

    let mut ok = true;
    let mut detail = Vec::new();
    for (name, params) in &checks {
        let n: usize = params.iter().map(Tensor::len).sum();
        assert!(n <= 200, "{name} has {n} parameters");
        let e32 = run(name, params, false);
        let e64 = run(name, params, true);
        ok &= e32 < 1e-3 && e64 < 1e-6;
        detail.push(format!("{name} {e32:.1e}/{e64:.1e}"));
    }
    let elapsed = t0.elapsed();
    ok &= elapsed < Duration::from_secs(30);
    report(
        4,
        ok,
        "gradient checks (f32 < 1e-3, f64 < 1e-6)",
        &detail.join(", "),
        elapsed,
    );
    assert!(ok, "{detail:?}");
}

// 5 ----------------------------------------------------------------------

#[test]
fn criterion_5_toy_training() {
    let t0 = Instant::now();
    let seed = 7;
    let set = synth_set([100, 100, 100], 64, seed);
    let (images, labels) = set.into_iter().map(|(i, l)| (i.pixels, l as usize)).unzip();
    let data = InMemoryDataset::new(images, labels).unwrap();
    let spec = build_reduced(0.25, 64, 3, true).unwrap();
    assert_eq!(spec.stages[0].out_channels, 8);
    assert!(spec.stages.iter().all(|s| s.repeats == 1));
    let mut net = Network::init(spec, seed);
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let rep = train_with(&mut net, &data, &cfg, |_| {}).unwrap();
    let acc = evaluate_flat(&net, &data).unwrap().report.accuracy.0.unwrap();
    let l = rep.losses();
    let ok = rep.epochs.len() == 10 && l[1] < l[0] && l[2] < l[1] && acc >= 0.95;
    let elapsed = t0.elapsed();
    let detail = format!(
        "losses {:.4} {:.4} {:.4} .. {:.4}, training accuracy {:.1}%",
        l[0],
        l[1],
        l[2],
        l[l.len() - 1],
        acc * 100.0
    );
    report(
        5,
        ok && elapsed < Duration::from_secs(600),
        "toy training",
        &detail,
        elapsed,
    );
    assert!(ok, "{detail}");
}

// 6 ----------------------------------------------------------------------

fn fingerprint(img: &[f32]) -> u64 {
    let mut h = DefaultHasher::new();
    img.iter().for_each(|v| v.to_bits().hash(&mut h));
    h.finish()
}

/// Records every image it is asked about.
struct Audited {
    inner: Box<dyn Classifier>,
    seen: Mutex<Vec<u64>>,
}

impl Audited {
    fn new(inner: impl Classifier + 'static) -> Self {
        Self {
            inner: Box::new(inner),
            seen: Mutex::new(Vec::new()),
        }
    }
}

impl Classifier for Audited {
    fn input_resolution(&self) -> usize {
        self.inner.input_resolution()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let per = batch.len() / batch.shape()[0];
        self.seen
            .lock()
            .unwrap()
            .extend(batch.data().chunks(per).map(fingerprint));
        self.inner.logits(batch)
    }
}

/// Lets the test keep a handle on an [`Audited`] the model owns.
struct Shared(Arc<Audited>);

impl Classifier for Shared {
    fn input_resolution(&self) -> usize {
        self.0.input_resolution()
    }
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.0.logits(batch)
    }
}

/// Binary split on mean brightness, so both routes are exercised.
struct Brightness {
    resolution: usize,
    threshold: f32,
}

impl Classifier for Brightness {
    fn input_resolution(&self) -> usize {
        self.resolution
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let n = batch.shape()[0];
        let per = batch.len() / n;
        let data = batch
            .data()
            .chunks(per)
            .flat_map(|img| {
                let m = img.iter().sum::<f32>() / per as f32;
                [(self.threshold - m) * 50.0, (m - self.threshold) * 50.0]
            })
            .collect();
        Tensor::new(vec![n, 2], data)
    }
}

fn audit(root: Box<dyn Classifier>, leaf: Box<dyn Classifier>, data: &ManifestDataset) -> (bool, String) {
    let root = Arc::new(Audited {
        inner: root,
        seen: Mutex::new(Vec::new()),
    });
    let leaf = Arc::new(Audited {
        inner: leaf,
        seen: Mutex::new(Vec::new()),
    });
    let model = HierModel::new(Box::new(Shared(root.clone())), Box::new(Shared(leaf.clone()))).unwrap();
    let ev = evaluate_hier(&model, data).unwrap();

    let truth: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    let merged = ev.confusion.merged(&ROOT_MERGE, 2).unwrap();
    let law = ev.stage1.as_ref() == Some(&merged);

    let prints: Vec<u64> = (0..data.len())
        .map(|i| fingerprint(data.image(i).unwrap().data()))
        .collect();
    let leaf_seen: HashSet<u64> = leaf.seen.lock().unwrap().iter().copied().collect();
    let root_seen = root.seen.lock().unwrap().len();
    let mut routed = 0;
    let mut trace_ok = root_seen == data.len();
    for (p, fp) in ev.predictions.iter().zip(&prints) {
        let to_leaf = p.stage(Stage::Root).map(|r| r.probs[1] > r.probs[0]).unwrap_or(false);
        match (to_leaf, p.stage(Stage::Leaf)) {
            (false, None) => {
                trace_ok &= p.label == Label::Normal && !leaf_seen.contains(fp) && p.trace_string() == "root"
            }
            (true, Some(_)) => {
                routed += 1;
                trace_ok &= p.label != Label::Normal && p.trace_string() == "root>leaf";
            }
            _ => trace_ok = false,
        }
    }
    trace_ok &= leaf.seen.lock().unwrap().len() == routed;
    let stage2_total = ev.stage2.as_ref().map(ConfusionMatrix::total).unwrap_or(0) as usize;
    let non_normal_routed = ev
        .predictions
        .iter()
        .zip(&truth)
        .filter(|(p, &t)| t != 0 && p.stage(Stage::Leaf).is_some())
        .count();
    trace_ok &= stage2_total == non_normal_routed;
    (
        law && trace_ok,
        format!(
            "{} images, {routed} routed to leaf, leaf saw {}",
            data.len(),
            leaf.seen.lock().unwrap().len()
        ),
    )
}

#[test]
fn criterion_6_hierarchical_decomposition() {
    let t0 = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    for seed in [1u64, 2, 3] {
        let dir = tempfile::tempdir().unwrap();
        let (rsna, covid) = write_corpus(dir.path(), [12, 12, 6], 32, seed).unwrap();
        let targets = CovidxTargets {
            train: [4, 4, 2],
            test: [8, 8, 4],
        };
        let (_, test) = build_covidx(&rsna, &covid, &targets, seed).unwrap();
        let data = ManifestDataset::new(&test, Some(dir.path().to_path_buf()), 32, LabelSpace::Flat);

        let mut means: Vec<f32> = (0..data.len())
            .map(|i| data.image(i).unwrap().data().iter().sum::<f32>())
            .collect();
        means.sort_by(f32::total_cmp);
        let threshold = means[means.len() / 2] / (32 * 32 * 3) as f32;
        let (a, d) = audit(
            Box::new(Brightness {
                resolution: 32,
                threshold,
            }),
            Box::new(Network::init(build_reduced(0.25, 32, 2, true).unwrap(), seed)),
            &data,
        );
        ok &= a;
        detail.push(d);

        // Every image routed to the leaf.
        let (a, d) = audit(
            Box::new(Brightness {
                resolution: 32,
                threshold: -1.0,
            }),
            Box::new(Network::init(build_reduced(0.25, 32, 2, true).unwrap(), seed + 30)),
            &data,
        );
        ok &= a;
        detail.push(d);

        // An untrained root; typically nothing reaches the leaf.
        let (a, d) = audit(
            Box::new(Network::init(build_reduced(0.25, 32, 2, true).unwrap(), seed + 10)),
            Box::new(Network::init(build_reduced(0.25, 32, 2, false).unwrap(), seed + 20)),
            &data,
        );
        ok &= a;
        detail.push(d);
    }
    let elapsed = t0.elapsed();
    report(
        6,
        ok && elapsed < Duration::from_secs(60),
        "hierarchical decomposition and trace audit",
        &detail.join("; "),
        elapsed,
    );
    assert!(ok, "{detail:?}");
}

#[test]
fn criterion_6_handcrafted_predictions() {
    // The merge law holds for prediction records built by hand as well.
    let stage = |stage, probs: &[f32]| StageOutput {
        stage,
        probs: probs.to_vec(),
    };
    let preds = vec![
        Prediction {
            label: Label::Normal,
            trace: vec![stage(Stage::Root, &[0.9, 0.1])],
        },
        Prediction {
            label: Label::Covid19,
            trace: vec![stage(Stage::Root, &[0.2, 0.8]), stage(Stage::Leaf, &[0.3, 0.7])],
        },
        Prediction {
            label: Label::Pneumonia,
            trace: vec![stage(Stage::Root, &[0.4, 0.6]), stage(Stage::Leaf, &[0.6, 0.4])],
        },
    ];
    let truth = [2, 2, 0];
    let flat = confusion_from_predictions(&truth, &preds).unwrap();
    let (s1, _) = cxrnet::eval::stage_matrices(&truth, &preds).unwrap();
    assert_eq!(s1, flat.merged(&ROOT_MERGE, 2).unwrap());
}

#[test]
fn criterion_6_leaf_untouched_for_normal_routes() {
    let leaf = Arc::new(Audited::new(Network::init(
        build_reduced(0.25, 32, 2, true).unwrap(),
        3,
    )));
    let root = Brightness {
        resolution: 32,
        threshold: 2.0,
    };
    let model = HierModel::new(Box::new(root), Box::new(Shared(leaf.clone()))).unwrap();
    let batch = Tensor::full(&[5, 32, 32, 3], 0.5);
    let preds = predict_hier(&model, &batch).unwrap();
    assert!(preds
        .iter()
        .all(|p| p.label == Label::Normal && p.stage(Stage::Leaf).is_none()));
    assert!(leaf.seen.lock().unwrap().is_empty());
}

// 7 ----------------------------------------------------------------------

#[test]
fn criterion_7_schedule() {
    let t0 = Instant::now();
    let trace = lr_trace(&[1.0, 0.9, 0.9, 0.9, 0.85, 0.85, 0.85], 1e-4, 2, 10.0);
    let expect = [1e-4, 1e-4, 1e-4, 1e-4, 1e-5, 1e-5, 1e-5];
    let ok = trace.len() == 7 && trace.iter().zip(expect).all(|(a, b)| (a - b).abs() <= 1e-12 * b);
    report(7, ok, "reduce-on-plateau trace", &format!("{trace:?}"), t0.elapsed());
    assert!(ok, "{trace:?}");
}

// 8 ----------------------------------------------------------------------

fn random_spec(rng: &mut ChaCha8Rng) -> cxrnet::arch::ArchSpec {
    let variant = *Variant::ALL.choose(rng).unwrap();
    let mut spec = build_arch(variant, rng.gen_range(2..1001), rng.gen()).unwrap();
    if rng.gen_bool(0.3) {
        spec.top = Top::ImageNet;
    }
    spec.input_resolution = rng.gen_range(8..600);
    for st in &mut spec.stages {
        st.out_channels = rng.gen_range(1..2049);
        st.repeats = rng.gen_range(1..9);
        st.stride = rng.gen_range(1..3);
        st.resolution = rng.gen_range(1..600);
        match st.operator {
            Operator::Conv => st.kernel = *[1, 3].choose(rng).unwrap(),
            Operator::MBConv => {
                st.kernel = *[3, 5].choose(rng).unwrap();
                st.expansion = *[1, 6].choose(rng).unwrap();
            }
        }
    }
    spec.validate().unwrap();
    spec
}

fn random_weight_file(rng: &mut ChaCha8Rng) -> WeightFile {
    let n = rng.gen_range(0..8);
    let mut names = HashSet::new();
    let mut entries = Vec::new();
    while entries.len() < n {
        let len = rng.gen_range(1..24);
        let name: String = (0..len)
            .map(|_| *b"abcxyz09._-/".choose(rng).unwrap() as char)
            .collect();
        if !names.insert(name.clone()) {
            continue;
        }
        let rank = rng.gen_range(1..5);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..6)).collect();
        let len: usize = shape.iter().product();
        // Arbitrary bit patterns: NaN payloads, signed zeros, subnormals.
        let data = (0..len).map(|_| f32::from_bits(rng.gen())).collect();
        entries.push((name, Tensor::new(shape, data).unwrap()));
    }
    WeightFile::new(entries).unwrap()
}

fn bits_equal(a: &WeightFile, b: &WeightFile) -> bool {
    a.len() == b.len()
        && a.entries().iter().zip(b.entries()).all(|((na, ta), (nb, tb))| {
            na == nb
                && ta.shape() == tb.shape()
                && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

#[test]
fn criterion_8_round_trips() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();
    for i in 0..100 {
        let spec = random_spec(&mut rng);
        let text = to_text(&spec);
        match parse_text(&text) {
            Ok(back) if back == spec && to_text(&back) == text => {}
            other => failures.push(format!("spec {i}: {other:?}")),
        }

        let wf = random_weight_file(&mut rng);
        let bytes = wf.to_bytes();
        match WeightFile::from_bytes(&bytes) {
            Ok(back) if bits_equal(&wf, &back) && back.to_bytes() == bytes => {}
            other => failures.push(format!("weights {i}: {:?}", other.map(|w| w.len()))),
        }
    }
    // Model-level: a parameter store survives save/bytes/load unchanged.
    for seed in 0..5 {
        let spec = build_reduced(0.25 * (1 + seed % 2) as f64, 32, 2 + seed as usize, seed % 2 == 0).unwrap();
        let store = weights::init(&spec, seed);
        let wf = weights::save(&store);
        let back = weights::load(&WeightFile::from_bytes(&wf.to_bytes()).unwrap(), &spec).unwrap();
        if !bits_equal(&wf, &weights::save(&back)) {
            failures.push(format!("model {seed}"));
        }
    }
    let elapsed = t0.elapsed();
    let ok = failures.is_empty() && elapsed < Duration::from_secs(10);
    report(
        8,
        ok,
        "weight file and arch text round trips",
        &format!("100 + 5 instances, {} failures", failures.len()),
        elapsed,
    );
    assert!(ok, "{failures:?}");
}
