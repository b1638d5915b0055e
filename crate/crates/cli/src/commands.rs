use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cxrnet::arch::text::{parse_text, to_text};
use cxrnet::arch::{build_arch_with_top, build_reduced, ArchSpec, CostReport, Top, Variant};
use cxrnet::classify::{
    activation_map, describe, heatmap_rgb, predict_flat, predict_hier, predictions_csv, HierModel, Network,
    PredictMode, Prediction,
};
use cxrnet::data::covidx::{apply_config, build_covidx, CovidxTargets, DatasetConfig};
use cxrnet::data::image::{load_image, AugSpec};
use cxrnet::data::synth::write_corpus;
use cxrnet::data::{Label, LabelSpace, Manifest};
use cxrnet::eval::{
    compare_report, evaluate_flat, evaluate_hier, CompareRow, ConfusionMatrix, Evaluation, MetricsReport,
};
use cxrnet::train::{train_with, Dataset, ManifestDataset, TrainConfig, TrainReport};
use cxrnet::weights::{apply_transfer, TransferPlan, WeightFile};

use crate::model::{self, Model};
use crate::run::Run;
use crate::{
    ArchArgs, Cli, Command, CompareArgs, DatasetArgs, EvalArgs, InferArgs, MapArgs, ModeArg, SynthArgs, TrainArgs,
};

const FLAT_NAMES: [&str; 3] = ["Normal", "Pneumonia", "COVID19"];

pub fn dispatch(cli: &Cli, snapshot: &str) -> Result<()> {
    let name = match &cli.command {
        Command::Arch(_) => "arch",
        Command::Synth(_) => "synth",
        Command::Dataset(_) => "dataset",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Infer(_) => "infer",
        Command::Map(_) => "map",
        Command::Compare(_) => "compare",
    };
    // Inputs are checked before anything is written.
    let inputs: Vec<&Path> = match &cli.command {
        Command::Arch(_) | Command::Synth(_) => vec![],
        Command::Dataset(a) => vec![&a.rsna, &a.covid],
        Command::Train(a) => [Some(a.train.as_path()), a.init.as_deref(), a.data_root.as_deref()]
            .into_iter()
            .flatten()
            .collect(),
        Command::Eval(a) => [Some(a.test.as_path()), Some(a.model.as_path()), a.data_root.as_deref()]
            .into_iter()
            .flatten()
            .collect(),
        Command::Infer(a) => vec![&a.model, &a.image],
        Command::Map(a) => vec![&a.model, &a.image],
        Command::Compare(_) => vec![],
    };
    for p in inputs {
        ensure!(p.exists(), "{} does not exist", p.display());
    }

    let mut run = Run::create(&cli.out, name, snapshot)?;
    let result = match &cli.command {
        Command::Arch(a) => arch(&mut run, a),
        Command::Synth(a) => synth(&mut run, a, cli.seed),
        Command::Dataset(a) => dataset(&mut run, a, cli.seed),
        Command::Train(a) => train(&mut run, a, cli.seed),
        Command::Eval(a) => eval(&mut run, a),
        Command::Infer(a) => infer(&mut run, a),
        Command::Map(a) => map(&mut run, a),
        Command::Compare(a) => compare(&mut run, a),
    };
    match result {
        Ok(()) => run.finish(),
        Err(e) => {
            run.fail(&e);
            Err(e)
        }
    }
}

fn cost_lines(run: &mut Run, cost: &CostReport) {
    run.say(format!("params: {}", cost.param_count));
    run.say(format!("macs: {}", cost.mac_count));
    run.say(format!("memory_mib: {:.1}", cost.memory_mib()));
    run.say(format!("elementwise_ops: {}", cost.elementwise_ops));
}

fn arch(run: &mut Run, a: &ArchArgs) -> Result<()> {
    let variant: Variant = a.variant.into();
    // The stock top is the ImageNet classifier, so it always has 1000 outputs.
    let (top, classes) = if a.imagenet_top {
        (Top::ImageNet, 1000)
    } else {
        (Top::Proposed, a.classes)
    };
    let spec = build_arch_with_top(variant, classes, !a.no_se, top)?;
    let cost = CostReport::for_spec(&spec);
    run.say(format!("variant: {variant}"));
    run.say(format!("resolution: {}", spec.input_resolution));
    run.say(format!("classes: {classes}"));
    run.say(format!("top: {}", if a.imagenet_top { "imagenet" } else { "proposed" }));
    run.say(format!("se: {}", !a.no_se));
    for s in &spec.stages {
        run.say(format!(
            "  {:<6} e={} k={} c={:<4} n={} s={} r={}",
            s.operator, s.expansion, s.kernel, s.out_channels, s.repeats, s.stride, s.resolution
        ));
    }
    cost_lines(run, &cost);
    run.write("arch.txt", to_text(&spec))?;
    run.write(
        "cost.csv",
        format!(
            "params,macs,memory_bytes,elementwise_ops\n{},{},{},{}\n",
            cost.param_count, cost.mac_count, cost.memory_bytes, cost.elementwise_ops
        ),
    )?;
    Ok(())
}

fn synth(run: &mut Run, a: &SynthArgs, seed: u64) -> Result<()> {
    let per_class: [usize; 3] = a
        .per_class
        .as_slice()
        .try_into()
        .context("--per-class takes three counts")?;
    let dir = run.path("corpus");
    let (rsna, covid) = write_corpus(&dir, per_class, a.resolution, seed)?;
    rsna.write(dir.join("rsna.csv"))?;
    covid.write(dir.join("covid.csv"))?;
    run.say(format!("images: {},{},{}", per_class[0], per_class[1], per_class[2]));
    run.say(format!("rsna manifest: {}", dir.join("rsna.csv").display()));
    run.say(format!("covid manifest: {}", dir.join("covid.csv").display()));
    Ok(())
}

/// Relative image paths become absolute against the manifest's directory, so
/// derived manifests stay valid wherever they are written.
fn read_anchored(path: &Path) -> Result<Manifest> {
    let m = Manifest::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let base = std::path::absolute(path)?
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let entries = m
        .iter()
        .map(|e| {
            let mut e = e.clone();
            if Path::new(&e.image_path).is_relative() {
                e.image_path = base.join(&e.image_path).to_string_lossy().into_owned();
            }
            e
        })
        .collect();
    Ok(Manifest::new(entries))
}

fn counts_line(c: [usize; 3]) -> String {
    format!("{},{},{}", c[0], c[1], c[2])
}

fn dataset(run: &mut Run, a: &DatasetArgs, seed: u64) -> Result<()> {
    let rsna = read_anchored(&a.rsna)?;
    let covid = read_anchored(&a.covid)?;
    let targets = match (&a.scale, &a.train_counts, &a.test_counts) {
        (Some(f), _, _) => CovidxTargets::scaled(*f)?,
        (None, Some(tr), Some(te)) => CovidxTargets {
            train: tr.as_slice().try_into().context("--train-counts takes three counts")?,
            test: te.as_slice().try_into().context("--test-counts takes three counts")?,
        },
        _ => CovidxTargets::default(),
    };
    let (train, test) = build_covidx(&rsna, &covid, &targets, seed)?;
    let config = DatasetConfig {
        mode: a.mode.into(),
        covid_aug_count: a.covid_aug,
        majority_cap: a.cap,
        per_class: a.per_class,
    };
    let aug = AugSpec::default().with_probability(a.aug_p);
    let effective = apply_config(&train, &config, &aug, seed)?;

    train.write(run.path("train_source.csv"))?;
    test.write(run.path("test.csv"))?;
    effective.write(run.path("train.csv"))?;
    run.write(
        "counts.csv",
        format!(
            "set,normal,pneumonia,covid19\nsource_train,{}\ntest,{}\ntrain,{}\n",
            counts_line(train.counts()),
            counts_line(test.counts()),
            counts_line(effective.counts())
        ),
    )?;
    run.say(format!("source train: {}", counts_line(train.counts())));
    run.say(format!("test: {}", counts_line(test.counts())));
    run.say(format!("mode: {:?}", config.mode));
    run.say(format!("train manifest: {}", run.path("train.csv").display()));
    run.say(format!("test manifest: {}", run.path("test.csv").display()));
    run.say("train counts (normal,pneumonia,covid19):");
    run.say(counts_line(effective.counts()));
    Ok(())
}

fn data_root(manifest: &Path, explicit: Option<&Path>) -> Result<PathBuf> {
    Ok(match explicit {
        Some(p) => p.to_path_buf(),
        None => std::path::absolute(manifest)?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    })
}

fn build_spec(a: &TrainArgs, classes: usize) -> Result<ArchSpec> {
    Ok(if a.toy {
        build_reduced(a.width, a.resolution, classes, !a.no_se)?
    } else {
        build_arch_with_top(a.variant.into(), classes, !a.no_se, Top::Proposed)?
    })
}

fn train_one(
    run: &mut Run,
    a: &TrainArgs,
    space: LabelSpace,
    manifest: &Manifest,
    root: &Path,
    seed: u64,
) -> Result<(Network, TrainReport)> {
    let spec = build_spec(a, space.num_classes())?;
    let mut net = Network::init(spec.clone(), seed);
    if let Some(init) = &a.init {
        let source = WeightFile::read(init)?;
        let mut plan = TransferPlan::backbone(&spec);
        if a.freeze_backbone {
            plan = plan.freeze_mapped();
        }
        net = Network::new(spec.clone(), apply_transfer(&plan, &source, &spec, net.params)?)?;
    }
    let data = ManifestDataset::new(manifest, Some(root.to_path_buf()), spec.input_resolution, space);
    ensure!(!data.is_empty(), "no training images for the {:?} model", space);
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed,
        ..TrainConfig::default()
    };
    let tag = format!("{space:?}").to_lowercase();
    let report = train_with(&mut net, &data, &cfg, |e| {
        run.say(format!(
            "[{tag}] epoch {:>3}  loss {:.6}  lr {:e}  acc {:.3}",
            e.epoch, e.loss, e.lr, e.accuracy
        ));
    })?;
    Ok((net, report))
}

fn train(run: &mut Run, a: &TrainArgs, seed: u64) -> Result<()> {
    let manifest = Manifest::read(&a.train).with_context(|| format!("reading manifest {}", a.train.display()))?;
    let root = data_root(&a.train, a.data_root.as_deref())?;
    let model = match a.mode {
        ModeArg::Flat => {
            let (net, report) = train_one(run, a, LabelSpace::Flat, &manifest, &root, seed)?;
            run.write("trace.csv", report.trace_csv())?;
            Model::Flat(net)
        }
        ModeArg::Hier => {
            let (root_net, r1) = train_one(run, a, LabelSpace::Root, &manifest, &root, seed)?;
            let (leaf_net, r2) = train_one(run, a, LabelSpace::Leaf, &manifest, &root, seed.wrapping_add(1))?;
            run.write("trace_root.csv", r1.trace_csv())?;
            run.write("trace_leaf.csv", r2.trace_csv())?;
            Model::Hier {
                root: root_net,
                leaf: leaf_net,
            }
        }
    };
    let dir = run.path("model");
    model::save(&model, &dir)?;
    run.say(format!("model ({}): {}", model.mode_name(), dir.display()));
    Ok(())
}

fn load_checked(dir: &Path, mode: Option<ModeArg>) -> Result<Model> {
    let m = model::load(dir)?;
    match (mode, &m) {
        (Some(ModeArg::Flat), Model::Hier { .. }) => {
            bail!("--mode flat but {} holds a hierarchical model", dir.display())
        }
        (Some(ModeArg::Hier), Model::Flat(_)) => bail!("--mode hier but {} holds a flat model", dir.display()),
        _ => Ok(m),
    }
}

fn eval(run: &mut Run, a: &EvalArgs) -> Result<()> {
    let m = load_checked(&a.model, a.mode)?;
    let manifest = Manifest::read(&a.test).with_context(|| format!("reading manifest {}", a.test.display()))?;
    let root = data_root(&a.test, a.data_root.as_deref())?;
    let data = ManifestDataset::new(&manifest, Some(root), m.resolution(), LabelSpace::Flat);
    let cost = m.cost();
    let (mode, ev): (PredictMode, Evaluation) = match m {
        Model::Flat(net) => (PredictMode::Flat, evaluate_flat(&net, &data)?),
        hier => (PredictMode::Hier, evaluate_hier(&hier.into_hier()?, &data)?),
    };

    run.say(format!("mode: {}", mode.as_str()));
    run.say(ev.report.summary());
    run.say("confusion (rows true, columns predicted):");
    run.say(ev.confusion.to_text(&FLAT_NAMES).trim_end());
    run.write("confusion.csv", ev.confusion.to_csv(&FLAT_NAMES))?;
    if let (Some(s1), Some(s2)) = (&ev.stage1, &ev.stage2) {
        run.say("stage-1 confusion (root: Normal vs Pneumonia incl. COVID19):");
        run.say(s1.to_text(LabelSpace::Root.class_names()).trim_end());
        run.say("stage-2 confusion (leaf: Pneumonia vs COVID19, non-Normal samples the root passed on):");
        run.say(s2.to_text(LabelSpace::Leaf.class_names()).trim_end());
        run.write("stage1.csv", s1.to_csv(LabelSpace::Root.class_names()))?;
        run.write("stage2.csv", s2.to_csv(LabelSpace::Leaf.class_names()))?;
    }
    let rows: Vec<(String, PredictMode, Prediction)> = ev
        .predictions
        .iter()
        .enumerate()
        .map(|(i, p)| (data.entry(i).image_path.clone(), mode, p.clone()))
        .collect();
    run.write("predictions.csv", predictions_csv(&rows)?)?;
    run.write("report.txt", format!("{}\n", ev.report.summary()))?;
    for (tag, path) in model::arch_files(&a.model) {
        run.write(&format!("arch_{tag}.txt"), std::fs::read(&path)?)?;
    }
    cost_lines(run, &cost);
    Ok(())
}

fn load_one(path: &Path, resolution: usize) -> Result<cxrnet::tensor::Tensor> {
    let img = load_image(path, resolution).with_context(|| format!("loading {}", path.display()))?;
    Ok(img.pixels.reshape(&[1, resolution, resolution, 3])?)
}

fn predict_one(m: &Model, path: &Path) -> Result<Prediction> {
    let batch = load_one(path, m.resolution())?;
    let preds = match m {
        Model::Flat(net) => predict_flat(net, &batch)?,
        Model::Hier { root, leaf } => {
            let hm = HierModel::new(Box::new(root.clone()), Box::new(leaf.clone()))?;
            predict_hier(&hm, &batch)?
        }
    };
    preds.into_iter().next().context("no prediction")
}

fn infer(run: &mut Run, a: &InferArgs) -> Result<()> {
    let m = model::load(&a.model)?;
    let p = predict_one(&m, &a.image)?;
    let probs = p.class_probs();
    run.say(format!("label: {}", p.label));
    for (name, v) in ["p_normal", "p_pneumonia", "p_covid"].iter().zip(probs) {
        match v {
            Some(x) => run.say(format!("{name}: {x:.6}")),
            None => run.say(format!("{name}: -")),
        }
    }
    if probs[1].is_none() {
        // The root stopped at Normal; the leaf never ran.
        run.say(format!("p_pneumonia+p_covid: {:.6}", 1.0 - probs[0].unwrap_or(0.0)));
    }
    run.say(format!("trace: {}", p.trace_string()));
    run.say(describe(&p));
    let mode = if matches!(m, Model::Flat(_)) {
        PredictMode::Flat
    } else {
        PredictMode::Hier
    };
    run.write(
        "prediction.csv",
        predictions_csv(&[(a.image.to_string_lossy().into_owned(), mode, p)])?,
    )?;
    Ok(())
}

fn map(run: &mut Run, a: &MapArgs) -> Result<()> {
    let m = model::load(&a.model)?;
    let p = predict_one(&m, &a.image)?;
    let target: Label = a.class.map(Into::into).unwrap_or(p.label);
    let (net, idx, which) = match &m {
        Model::Flat(net) => (net, target as usize, "flat"),
        Model::Hier { root, leaf } => match target {
            Label::Normal => (root, 0, "root"),
            l => (leaf, l as usize - 1, "leaf"),
        },
    };
    let r = net.input_resolution();
    let img = load_image(&a.image, r)?;
    let cam = activation_map(net, &img.pixels, idx)?;
    let heat = heatmap_rgb(&img.pixels, &cam, a.alpha)?;
    let out = run.path("heatmap.png");
    heat.save(&out).with_context(|| format!("writing {}", out.display()))?;
    run.say(format!("predicted: {}", p.label));
    run.say(format!("explained class: {target} ({which} model, output {idx})"));
    run.say(format!("heatmap: {}", out.display()));
    Ok(())
}

fn compare(run: &mut Run, a: &CompareArgs) -> Result<()> {
    let mut parsed = Vec::new();
    for spec in &a.evals {
        let (name, dir) = spec
            .split_once('=')
            .with_context(|| format!("`{spec}`: expected NAME=DIR"))?;
        let dir = PathBuf::from(dir);
        let confusion = std::fs::read_to_string(dir.join("confusion.csv"))
            .with_context(|| format!("{} is not an eval run", dir.display()))?;
        let metrics = MetricsReport::from_confusion(&ConfusionMatrix::from_csv(&confusion)?);
        let mut cost: Option<CostReport> = None;
        for tag in ["flat", "root", "leaf"] {
            let p = dir.join(format!("arch_{tag}.txt"));
            if p.exists() {
                let c = CostReport::for_spec(&parse_text(&std::fs::read_to_string(&p)?)?);
                cost = Some(cost.map_or(c, |acc| model::add_costs(&acc, &c)));
            }
        }
        parsed.push((name.to_string(), metrics, cost));
    }
    let rows: Vec<CompareRow<'_>> = parsed
        .iter()
        .map(|(name, metrics, cost)| CompareRow {
            name,
            metrics,
            cost: cost.as_ref(),
        })
        .collect();
    let (csv, text) = compare_report(&rows);
    run.write("compare.csv", &csv)?;
    run.write("compare.txt", &text)?;
    run.say(text.trim_end());
    Ok(())
}
