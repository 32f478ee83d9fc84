use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "i2x",
    version,
    about = "Structured explanations from saliency maps captured across training checkpoints"
)]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "I2X_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Train the reference CNN and record checkpoint artifacts of the explanation set.
    Train(TrainArgs),
    /// Fit PCA + K-Means prototypes on the final-model features.
    Prototypes(PrototypesArgs),
    /// Compute the per-transition responsibility maps.
    Analyze(AnalyzeArgs),
    /// Assemble shared/specialized/uncertain prototypes, graphs and matrices.
    Explain(ExplainArgs),
    /// Exclude explanation samples containing an uncertain prototype.
    Curate(CurateArgs),
    /// Repeated fine-tuning of the trained model under several schedules.
    Finetune(FinetuneArgs),
    /// Accuracy and confusion matrix on the test split.
    Eval(EvalArgs),
    /// Check a .i2x run archive.
    Validate(ValidateArgs),
    /// Generate a synthetic glyph dataset with ground-truth strokes.
    Glyphs(GlyphsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Dot,
    Json,
    Csv,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Directory with train-images-idx3-ubyte[.gz] and train-labels-idx1-ubyte[.gz].
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 40)]
    pub ckpt_every: u64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.1)]
    pub explain_fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub explain_seed: u64,
    /// Seeds weight initialisation and minibatch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct PrototypesArgs {
    /// Run archive, or the directory written by `train`.
    #[arg(long)]
    pub artifacts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long, default_value_t = 0.95)]
    pub pca_var: f64,
    #[arg(long, default_value_t = 10)]
    pub n_init: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub artifacts: PathBuf,
    /// Prototype book, or the directory written by `prototypes`.
    #[arg(long)]
    pub protos: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Defaults to max(5, N/200).
    #[arg(long)]
    pub min_cluster_size: Option<usize>,
    /// Defaults to 5.
    #[arg(long)]
    pub min_samples: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub artifacts: PathBuf,
    #[arg(long)]
    pub protos: PathBuf,
    /// Trajectory, or the directory written by `analyze`.
    #[arg(long)]
    pub trajectory: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Classes to explain (repeatable); all classes when omitted.
    #[arg(long = "class")]
    pub classes: Vec<usize>,
    /// Class pair for uncertain-prototype detection, as A,B.
    #[arg(long, value_parser = parse_pair)]
    pub pair: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0.02)]
    pub eps_conf: f64,
    #[arg(long, default_value_t = 0.25)]
    pub rho: f64,
    #[arg(long, default_value_t = 2)]
    pub flip_min: usize,
    #[arg(long, default_value_t = 4)]
    pub subgroup_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Outputs to write (repeatable); all when omitted.
    #[arg(long, value_enum)]
    pub format: Vec<Format>,
}

#[derive(Debug, Args, Serialize)]
pub struct CurateArgs {
    #[arg(long)]
    pub artifacts: PathBuf,
    #[arg(long)]
    pub protos: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prototype to remove, as P-<k>.
    #[arg(long, value_parser = parse_uncertain)]
    pub uncertain: usize,
    /// Only exclude samples labelled A or B.
    #[arg(long, value_parser = parse_pair)]
    pub pair: Option<(usize, usize)>,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    /// Dataset directory used for `train` (train split plus t10k test split).
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    pub artifacts: PathBuf,
    /// Curation plan or the directory written by `curate`; needed for curated schedules.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// full | curated | curated,full (repeatable); all three when omitted.
    #[arg(long = "schedule", value_parser = parse_schedule)]
    pub schedules: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Repeat r uses seed + r.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to the base model's most confused test pair.
    #[arg(long, value_parser = parse_pair)]
    pub pair: Option<(usize, usize)>,
    #[arg(long = "finetune-lr", alias = "lr", default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Directory written by `train`, or a model file.
    #[arg(long)]
    pub artifacts: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub artifacts: PathBuf,
    /// Also write validation.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GlyphsArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Glyph spec JSON; the built-in shared-stroke demo when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
}

pub fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected A,B, got {s:?}"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("{v:?} is not a class id"))
    };
    let (a, b) = (parse(a)?, parse(b)?);
    if a == b {
        return Err("the two classes must differ".into());
    }
    Ok((a, b))
}

pub fn parse_uncertain(s: &str) -> Result<usize, String> {
    i2x_core::prototypes::parse_prototype_name(s)
        .ok_or_else(|| format!("expected P-<k> with k >= 1, got {s:?}"))
}

pub fn parse_schedule(s: &str) -> Result<String, String> {
    match s {
        "full" | "curated" | "curated,full" => Ok(s.to_string()),
        _ => Err(format!("expected full, curated or curated,full, got {s:?}")),
    }
}
