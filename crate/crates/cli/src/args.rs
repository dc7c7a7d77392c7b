use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cxrinf", version, about = "Chest X-ray infection mapping toolkit")]
pub struct Cli {
    /// Versioned TOML configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Store root. Relative paths are resolved against it and manifests of
    /// commands without an output location are written under `runs/`.
    #[arg(long, global = true, env = "CXRINF_DATA_DIR")]
    pub data_dir: Option<PathBuf>,

    /// Where to write this run's manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Import a directory of PNG/JPEG/DICOM radiographs into a catalog.
    Ingest(IngestArgs),
    /// Plan stratified k-fold splits over a catalog.
    Folds(FoldsArgs),
    /// Train a segmentation network.
    TrainSeg(TrainSegArgs),
    /// Train a two-way classifier.
    TrainCls(TrainClsArgs),
    /// Cross-validate a segmentation configuration.
    Cv(CvArgs),
    /// Predict probability masks with a trained network.
    Infer(InferArgs),
    /// Render an infection map from an image and a probability mask.
    RenderMap(RenderMapArgs),
    /// Apply the detection rule to probability masks.
    Detect(DetectArgs),
    /// Compute the evaluation metrics.
    Eval(EvalArgs),
    /// Grad-CAM activation map of a classifier.
    Gradcam(GradcamArgs),
    /// Compare a Grad-CAM map and an infection map against a ground-truth mask.
    CompareMaps(CompareMapsArgs),
    /// Build Stage I or Stage II annotation tasks.
    AnnotateCreate(AnnotateCreateArgs),
    /// Serve an annotation campaign over HTTP.
    AnnotateServe(AnnotateServeArgs),
    /// Export adopted ground-truth masks, importing manual fallbacks first.
    AnnotateExport(AnnotateExportArgs),
    /// Generate the synthetic disk-on-noise corpus.
    SynthCorpus(SynthArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LabelArg {
    Covid,
    Control,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Pixel,
    Sample,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long, value_enum)]
    pub label: LabelArg,
    /// Id prefix; defaults to the source directory name.
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub catalog: PathBuf,
}

#[derive(Debug, Args)]
pub struct FoldsArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub decoder: Option<String>,
    #[arg(long)]
    pub encoder: Option<String>,
    /// Freeze the encoder (`--frozen true|false`).
    #[arg(long)]
    pub frozen: Option<bool>,
    /// `desk` or `paper`.
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Pretrained encoder checkpoint.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainSegArgs {
    /// Corpus directory (`catalog.jsonl`, images, `masks/`).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Train on the training split of this fold only.
    #[arg(long, requires = "plan")]
    pub fold: Option<usize>,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainClsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Fold plan from `folds`; planned on the fly when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub fold_seed: Option<u64>,
    /// Run only these folds.
    #[arg(long, value_delimiter = ',')]
    pub folds: Option<Vec<usize>>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus directory to predict.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub data: Option<PathBuf>,
    /// Single image files to predict.
    #[arg(long, num_args = 1..)]
    pub image: Vec<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Also write infection maps and detection sidecars.
    #[arg(long)]
    pub render: bool,
    #[command(flatten)]
    pub render_opts: RenderOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RenderOpts {
    #[arg(long)]
    pub tau_vis: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_area: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderMapArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub prob: PathBuf,
    #[command(flatten)]
    pub render_opts: RenderOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// A probability PNG.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub prob: Option<PathBuf>,
    /// A prediction directory written by `infer` or `cv`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[command(flatten)]
    pub render_opts: RenderOpts,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Counts as `tn=..,fp=..,fn=..,tp=..`.
    #[arg(long, conflicts_with_all = ["predictions", "data"], required_unless_present = "predictions")]
    pub confusion: Option<String>,
    #[arg(long, requires = "data")]
    pub predictions: Option<PathBuf>,
    /// Corpus holding the ground truth for `--predictions`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Level reported for `--confusion`.
    #[arg(long, value_enum, default_value = "sample")]
    pub level: LevelArg,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0])]
    pub beta: Vec<f64>,
    #[command(flatten)]
    pub render_opts: RenderOpts,
    /// Print the full report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum, default_value = "covid")]
    pub class: LabelArg,
    /// Layer name; the last encoder stage by default.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub tau_vis: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareMapsArgs {
    /// Classifier checkpoint for the Grad-CAM side.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Probability PNG from the segmentation side.
    #[arg(long)]
    pub prob: PathBuf,
    /// Ground-truth mask PNG.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Debug, Args)]
pub struct AnnotateCreateArgs {
    #[arg(long)]
    pub campaign: PathBuf,
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Stage 1: corpus with manual masks. Stage 2: corpus holding the
    /// images of the collaborative set.
    #[arg(long)]
    pub data: PathBuf,
    /// Stage 2: archive written by `annotate-export`.
    #[arg(long)]
    pub collab: Option<PathBuf>,
    /// Stage 2: corpus of unannotated images.
    #[arg(long)]
    pub unannotated: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub scale: Option<String>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct AnnotateServeArgs {
    #[arg(long)]
    pub campaign: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Args)]
pub struct AnnotateExportArgs {
    #[arg(long)]
    pub campaign: PathBuf,
    /// Manual fallback masks as `<image-id>=<mask.png>`.
    #[arg(long = "import-fallback")]
    pub import_fallback: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub covid_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long = "from")]
    pub from: PathBuf,
}
