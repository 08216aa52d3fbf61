use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "defectforge", version, about = "Rare-defect augmentation and detection evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML file with optional [gan], [augment], [detector] and [eval] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert, derive and split annotated datasets.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Train a GP-WGAN on the defect crops of one class.
    TrainGan(TrainGanArgs),
    /// Sample defect patches from a trained generator.
    Synthesize(SynthesizeArgs),
    /// Append synthetic defect images to a dataset.
    Augment(AugmentArgs),
    /// Train the built-in detector or run it on a dataset.
    Detect {
        #[command(subcommand)]
        action: DetectAction,
    },
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Minority-class AP over a grid of real and synthetic sample counts.
    Sensitivity(SensitivityArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Canonical,
    Coco,
    Voc,
}

#[derive(Debug, Subcommand)]
pub enum DatasetAction {
    /// Re-encode annotations; VOC input is a directory of XML files.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "canonical")]
        from: Format,
        #[arg(long, value_enum, default_value = "canonical")]
        to: Format,
        /// Prefix joined to VOC <filename> entries.
        #[arg(long, default_value = "")]
        image_prefix: String,
    },
    /// Build box annotations from segmentation masks named like their images.
    Seg2bbox {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        class: String,
    },
    /// Drop images containing a class from a dataset.
    MakeImbalanced {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        drop: usize,
    },
    /// Stratified k-fold split into fold{i}-train.json / fold{i}-test.json.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Generate the synthetic three-shape dataset plus defect-free beds.
    Shapes {
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 40)]
        beds: usize,
        #[arg(long, default_value_t = 48)]
        image_size: u32,
    },
}

#[derive(Debug, Args)]
pub struct TrainGanArgs {
    #[arg(long, required_unless_present = "beds", requires = "class")]
    pub input: Option<PathBuf>,
    #[arg(long, required_unless_present = "beds")]
    pub class: Option<String>,
    /// Train on whole defect-free images instead, resized to the patch shape,
    /// to obtain a generator of synthetic beds.
    #[arg(long, conflicts_with_all = ["input", "class"])]
    pub beds: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Stretch each patch to span the full intensity range.
    #[arg(long)]
    pub rescale: bool,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Directory of defect-free PNG images.
    #[arg(long)]
    pub beds: Option<PathBuf>,
    /// Per-class generator as `class=path`; repeatable.
    #[arg(long = "generator")]
    pub generators: Vec<String>,
    #[arg(long)]
    pub m_g: Option<usize>,
    #[arg(long)]
    pub real_fraction: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum DetectAction {
    Train {
        #[arg(long)]
        input: PathBuf,
    },
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub iou: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub minority: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub m_r: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub m_g: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    #[arg(long)]
    pub beds: Option<PathBuf>,
    #[arg(long = "generator")]
    pub generators: Vec<String>,
}
