//! The `bsap` command line: scoring, evaluation, alpha sweeps, synthetic
//! hallucination runs, prompt catalogs and input validation.

use std::ffi::OsString;
use std::path::PathBuf;

use bsap_core::retrieval::Mode;
use bsap_core::scorebal::{Aggregator, Normalizer};
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{
    cmd_build_prompts, cmd_convert, cmd_eval, cmd_score, cmd_simulate, cmd_sweep_alpha,
};
pub use config::{Direction, RunConfig, Task};
pub use error::{CliError, EXIT_DATA, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "bsap", version, about = "Balanced-score retrieval calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score annotated candidate sets and write one JSON line per query.
    Score(ScoreArgs),
    /// Compute accuracy or IoU metrics from a results file.
    Eval(EvalArgs),
    /// Evaluate the hybrid score over a grid of blend weights.
    SweepAlpha(SweepArgs),
    /// Generate a synthetic biased population and measure retrieval on it.
    Simulate(SimulateArgs),
    /// Build the auxiliary prompt catalog from head lists and templates.
    BuildPrompts(PromptArgs),
    /// Validate matrices, manifests and annotations; optionally L2-normalize.
    Convert(ConvertArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ScoringFlags {
    /// raw, bsap or bsap_h
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Logit scale applied to cosine similarity [default: 100]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Hybrid blend weight [default: 0.75 for rec, 0.5 for ris]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// sum or mean [default: sum]
    #[arg(long)]
    pub aggregator: Option<Aggregator>,
    /// softmax, minmax or direct [default: softmax]
    #[arg(long)]
    pub normalizer: Option<Normalizer>,
}

impl ScoringFlags {
    fn apply(&self, c: &mut RunConfig) {
        c.mode = self.mode;
        c.gamma = self.gamma;
        c.alpha = self.alpha;
        c.aggregator = self.aggregator;
        c.normalizer = self.normalizer;
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct InputFlags {
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long, value_enum)]
    pub direction: Option<Direction>,
    /// Text embeddings (EMB1)
    #[arg(long)]
    pub texts: Option<PathBuf>,
    #[arg(long)]
    pub text_manifest: Option<PathBuf>,
    /// Image embeddings (EMB1)
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub image_manifest: Option<PathBuf>,
    /// Auxiliary embeddings: prompt texts, or images for image-to-text
    #[arg(long)]
    pub aux: Option<PathBuf>,
    /// Auxiliary images drawn per query (image-to-text only) [default: 1]
    #[arg(long)]
    pub aux_count: Option<usize>,
    /// Annotation JSONL
    #[arg(long)]
    pub annotations: Option<PathBuf>,
}

impl InputFlags {
    fn apply(&self, c: &mut RunConfig) {
        c.task = self.task;
        c.direction = self.direction;
        c.texts = self.texts.clone();
        c.text_manifest = self.text_manifest.clone();
        c.images = self.images.clone();
        c.image_manifest = self.image_manifest.clone();
        c.aux = self.aux.clone();
        c.aux_count = self.aux_count;
        c.annotations = self.annotations.clone();
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    /// JSON config; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub scoring: ScoringFlags,
    #[command(flatten)]
    pub inputs: InputFlags,
    /// Seed for auxiliary image sampling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Results JSONL to write
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Results JSONL from `score`
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// Box IoU a prediction must exceed [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Directory for metrics.json and metrics.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub scoring: ScoringFlags,
    #[command(flatten)]
    pub inputs: InputFlags,
    /// Synthetic population (preset name or JSON file) instead of annotations
    #[arg(long)]
    pub population: Option<String>,
    /// Comma-separated alpha values
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Evenly spaced alpha values on [0, 1], endpoints included
    #[arg(long, conflicts_with = "grid")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV to write
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset (g1, unbiased, fig3_pair) or population JSON file
    #[arg(long)]
    pub population: Option<String>,
    /// Overrides the population seed
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub aggregator: Option<Aggregator>,
    /// Directory for report.json and scatter.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PromptArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in list names or files, comma-separated [default: coco80,cifar100]
    #[arg(long, value_delimiter = ',')]
    pub head_lists: Option<Vec<String>>,
    /// Template catalog JSON [default: built-in]
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Pick the template with this many words
    #[arg(long)]
    pub template_length: Option<usize>,
    /// Pick the template matching this query's word count
    #[arg(long, conflicts_with = "template_length")]
    pub query: Option<String>,
    /// Catalog JSON to write
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ConvertArgs {
    /// EMB1 matrix to validate
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Manifest for --matrix
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Annotation JSONL to validate
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Write an L2-normalized copy of --matrix to --out
    #[arg(long, requires_all = ["matrix", "out"])]
    pub normalize: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn dispatch(command: &Command) -> Result<String, CliError> {
    match command {
        Command::Score(a) => {
            let mut flags = RunConfig {
                seed: a.seed,
                out: a.out.clone(),
                ..RunConfig::default()
            };
            a.scoring.apply(&mut flags);
            a.inputs.apply(&mut flags);
            cmd_score(&RunConfig::resolve(a.config.as_deref(), flags)?)
        }
        Command::Eval(a) => {
            let flags = RunConfig {
                results: a.results.clone(),
                annotations: a.annotations.clone(),
                task: a.task,
                threshold: a.threshold,
                out: a.out.clone(),
                ..RunConfig::default()
            };
            cmd_eval(&RunConfig::resolve(a.config.as_deref(), flags)?)
        }
        Command::SweepAlpha(a) => {
            let mut flags = RunConfig {
                population: a.population.clone(),
                grid: a.grid.clone(),
                seed: a.seed,
                out: a.out.clone(),
                ..RunConfig::default()
            };
            a.scoring.apply(&mut flags);
            a.inputs.apply(&mut flags);
            if let Some(n) = a.steps {
                flags.grid = Some(commands::even_grid(n)?);
            }
            cmd_sweep_alpha(&RunConfig::resolve(a.config.as_deref(), flags)?)
        }
        Command::Simulate(a) => {
            let flags = RunConfig {
                population: a.population.clone(),
                seed: a.seed,
                gamma: a.gamma,
                alpha: a.alpha,
                aggregator: a.aggregator,
                out: a.out.clone(),
                ..RunConfig::default()
            };
            cmd_simulate(&RunConfig::resolve(a.config.as_deref(), flags)?)
        }
        Command::BuildPrompts(a) => {
            let flags = RunConfig {
                head_lists: a.head_lists.clone(),
                templates: a.templates.clone(),
                template_length: a.template_length,
                out: a.out.clone(),
                ..RunConfig::default()
            };
            cmd_build_prompts(
                &RunConfig::resolve(a.config.as_deref(), flags)?,
                a.query.as_deref(),
            )
        }
        Command::Convert(a) => cmd_convert(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout, errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
