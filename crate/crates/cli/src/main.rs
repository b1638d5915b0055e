//! `cxrnet` command line: architecture reports, dataset assembly, training,
//! evaluation, inference, activation maps and model comparison.

mod commands;
mod config;
mod model;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use cxrnet::arch::Variant;
use cxrnet::data::covidx::DatasetMode;
use cxrnet::data::Label;

#[derive(Parser, Debug)]
#[command(
    name = "cxrnet",
    version,
    about = "EfficientNet chest X-ray classification at desk scale"
)]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// `key = value` file supplying defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Parent of the per-run output directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print an architecture and its cost report.
    Arch(ArchArgs),
    /// Write a synthetic chest-film corpus with source manifests.
    Synth(SynthArgs),
    /// Split sources into train/test and apply a training-set configuration.
    Dataset(DatasetArgs),
    /// Train a flat or hierarchical model.
    Train(TrainArgs),
    /// Evaluate a model on a labelled manifest.
    Eval(EvalArgs),
    /// Classify one image.
    Infer(InferArgs),
    /// Class activation map for one image.
    Map(MapArgs),
    /// Side-by-side metrics and footprints of evaluation runs.
    Compare(CompareArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantArg {
    B0,
    B1,
    B2,
    B3,
    B4,
    B5,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::B0 => Variant::B0,
            VariantArg::B1 => Variant::B1,
            VariantArg::B2 => Variant::B2,
            VariantArg::B3 => Variant::B3,
            VariantArg::B4 => Variant::B4,
            VariantArg::B5 => Variant::B5,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Flat,
    Hier,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetModeArg {
    Raw,
    RawPlusAug,
    Balanced,
}

impl From<DatasetModeArg> for DatasetMode {
    fn from(m: DatasetModeArg) -> Self {
        match m {
            DatasetModeArg::Raw => DatasetMode::Raw,
            DatasetModeArg::RawPlusAug => DatasetMode::RawPlusAug,
            DatasetModeArg::Balanced => DatasetMode::Balanced,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelArg {
    Normal,
    Pneumonia,
    Covid19,
}

impl From<LabelArg> for Label {
    fn from(l: LabelArg) -> Self {
        match l {
            LabelArg::Normal => Label::Normal,
            LabelArg::Pneumonia => Label::Pneumonia,
            LabelArg::Covid19 => Label::Covid19,
        }
    }
}

#[derive(Args, Debug)]
pub struct ArchArgs {
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Drop squeeze-and-excitation from every MBConv block.
    #[arg(long)]
    pub no_se: bool,
    /// Stock 1000-class ImageNet classifier instead of the proposed head.
    #[arg(long)]
    pub imagenet_top: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Images per class: Normal,Pneumonia,COVID19.
    #[arg(long, value_delimiter = ',', default_values_t = [40, 40, 20])]
    pub per_class: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    /// Manifest of the Normal/Pneumonia source.
    #[arg(long)]
    pub rsna: PathBuf,
    /// Manifest of the COVID19 source.
    #[arg(long)]
    pub covid: PathBuf,
    #[arg(long, value_enum, default_value_t = DatasetModeArg::Raw)]
    pub mode: DatasetModeArg,
    /// Scale the full partition sizes by this fraction.
    #[arg(long, conflicts_with_all = ["train_counts", "test_counts"])]
    pub scale: Option<f64>,
    /// Explicit train partition sizes: Normal,Pneumonia,COVID19.
    #[arg(long, value_delimiter = ',', requires = "test_counts")]
    pub train_counts: Option<Vec<usize>>,
    /// Explicit test partition sizes: Normal,Pneumonia,COVID19.
    #[arg(long, value_delimiter = ',', requires = "train_counts")]
    pub test_counts: Option<Vec<usize>>,
    /// Augmented COVID19 copies added in raw-plus-aug mode.
    #[arg(long, default_value_t = 1000)]
    pub covid_aug: usize,
    /// Normal/Pneumonia cap in raw-plus-aug mode.
    #[arg(long, default_value_t = 4000)]
    pub cap: usize,
    /// Per-class size in balanced mode.
    #[arg(long, default_value_t = 1000)]
    pub per_class: usize,
    /// Probability of each augmentation transform.
    #[arg(long, default_value_t = 0.5)]
    pub aug_p: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    pub train: PathBuf,
    /// Directory relative image paths resolve against (default: the
    /// manifest's directory).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Flat)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = VariantArg::B0, conflicts_with = "toy")]
    pub variant: VariantArg,
    /// Width-reduced B0-shaped network with one block per stage.
    #[arg(long)]
    pub toy: bool,
    /// Width multiplier of the toy network.
    #[arg(long, default_value_t = 0.25, requires = "toy")]
    pub width: f64,
    /// Input resolution of the toy network.
    #[arg(long, default_value_t = 64, requires = "toy")]
    pub resolution: usize,
    #[arg(long)]
    pub no_se: bool,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Pretrained weight file; its backbone is copied, the head starts fresh.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Keep the copied backbone frozen (requires --init).
    #[arg(long, requires = "init")]
    pub freeze_backbone: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Expected model kind; checked against the model directory.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Args, Debug)]
pub struct MapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Class to explain (default: the predicted one).
    #[arg(long, value_enum)]
    pub class: Option<LabelArg>,
    /// Heatmap opacity over the image.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f32,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// `name=DIR` of an eval run; repeatable.
    #[arg(long = "eval", value_name = "NAME=DIR", required = true)]
    pub evals: Vec<String>,
}

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    let mut cmd = Cli::command();
    if let Some(path) = config::config_path(&args) {
        match config::ConfigFile::read(&path).and_then(|c| config::apply(cmd, &c)) {
            Ok(c) => cmd = c,
            Err(e) => {
                eprintln!("error: {e:#}");
                return ExitCode::from(2);
            }
        }
    }
    let matches = match cmd.try_get_matches_from_mut(&args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let snapshot = config::snapshot(&cmd, &matches);
    match commands::dispatch(&cli, &snapshot) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
