//! `neuronscope` command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors (missing
//! or malformed inputs, failed model calls).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use neuronscope::descriptors::DEFAULT_BLACKLIST;
use neuronscope::gateway::{Mode, WireFormat};
use serde::Serialize;

mod commands;
mod config;
mod manifest;

#[derive(Parser, Debug)]
#[command(
    name = "neuronscope",
    version,
    about = "Natural-language descriptors for individual neurons"
)]
pub struct Cli {
    /// JSON file of flag values; explicit flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads (default: number of available processors; 1 runs sequentially).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a JSONL corpus and apply the word-count / English filters.
    Ingest(IngestArgs),
    /// Assign every sentence to the calibration or validation split.
    Split(SplitArgs),
    /// Ask generative models for candidate descriptors of every sentence.
    GenDescriptors(GenArgs),
    /// Cluster candidate descriptors and apply manual labels.
    Cluster(ClusterArgs),
    /// Build the sentence x descriptor yes/no matrix.
    Annotate(AnnotateArgs),
    /// Assign descriptors to neurons from their top-activating sentences.
    Attribute(AttributeArgs),
    /// Score attributions against ground truth and across splits.
    Evaluate(EvaluateArgs),
    /// Write a planted-truth synthetic dataset.
    Synth(SynthArgs),
    /// Split distribution and descriptor correlation tables.
    Report(ReportArgs),
}

#[derive(Args, Debug, Serialize)]
struct IngestArgs {
    /// Input JSONL with "id", "text" and optional "category".
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    min_words: usize,
    #[arg(long, default_value_t = 200)]
    max_words: usize,
    /// Keep only sentences passing the ASCII-letter heuristic.
    #[arg(long)]
    english_only: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GatewayArgs {
    /// live, cache or replay.
    #[arg(long, default_value = "cache")]
    mode: Mode,
    /// Recorded responses for replay mode.
    #[arg(long)]
    fixtures_dir: Option<PathBuf>,
    #[arg(long, default_value = ".neuronscope-cache")]
    cache_dir: PathBuf,
    #[arg(long, env = "NEURONSCOPE_LLM_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, env = "NEURONSCOPE_LLM_API_KEY", hide_env_values = true)]
    #[serde(skip)]
    api_key: Option<String>,
    /// simple or chat-completions.
    #[arg(long, default_value = "simple")]
    wire_format: WireFormat,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Generator model id; repeat for several models.
    #[arg(long, required = true, value_delimiter = ',')]
    model: Vec<String>,
    /// Prompt template file with {EXAMPLE} and {INPUT} slots.
    #[arg(long)]
    template: Option<PathBuf>,
    /// JSON {"sentence", "descriptors"} shown as the worked example.
    #[arg(long)]
    example: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    max_output_tokens: u32,
    #[command(flatten)]
    gateway: GatewayArgs,
    /// Candidates JSONL.
    #[arg(long)]
    out: PathBuf,
    /// Also write the distinct surfaces, one per line, for embedding.
    #[arg(long)]
    surfaces_out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ClusterArgs {
    #[arg(long)]
    candidates: PathBuf,
    /// NEMB table covering every candidate surface.
    #[arg(long)]
    embeddings: PathBuf,
    /// JSON {cluster index or member surface: label}.
    #[arg(long)]
    label_map: Option<PathBuf>,
    #[arg(long, default_value_t = 0.75)]
    cluster_threshold: f32,
    #[arg(long, default_value_t = 10)]
    min_size: usize,
    /// Labels removed from the final set.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BLACKLIST.map(String::from))]
    blacklist: Vec<String>,
    /// Keep every label.
    #[arg(long)]
    no_blacklist: bool,
    /// Clusters JSON.
    #[arg(long)]
    out: PathBuf,
    /// Descriptor set JSON (needed with --label-map).
    #[arg(long)]
    descriptors_out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct AnnotateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Descriptor set JSON.
    #[arg(long)]
    descriptors: PathBuf,
    #[arg(long)]
    model: String,
    /// Prompt template file with {DESCRIPTOR} and {INPUT} slots.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_output_tokens: u32,
    #[command(flatten)]
    gateway: GatewayArgs,
    /// Matrix (.nbin).
    #[arg(long)]
    out: PathBuf,
    /// Also export the matrix as 0/1 CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Unresolved {
    CountAsNo,
    Exclude,
}

#[derive(Args, Debug, Serialize)]
struct AttributeArgs {
    /// Activation store (.nact).
    #[arg(long)]
    store: PathBuf,
    /// Annotation matrix (.nbin).
    #[arg(long)]
    matrix: PathBuf,
    /// Exemplar set size as a percentage of the store.
    #[arg(long, default_value_t = 1.0)]
    k_percent: f64,
    /// Assign descriptors with frequency strictly above this.
    #[arg(long, default_value_t = 0.35)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = Unresolved::CountAsNo)]
    unresolved: Unresolved,
    /// Attribution report JSONL.
    #[arg(long)]
    out: PathBuf,
    /// Also write descriptor -> neurons JSON.
    #[arg(long)]
    inverse_out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    /// Calibration attribution report.
    #[arg(long)]
    attr_cal: PathBuf,
    /// Validation attribution report, for consistency curves.
    #[arg(long)]
    attr_val: Option<PathBuf>,
    /// Ground truth JSON {"neurons": [{"layer", "index", "labels"}]}.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Matrix for the descriptor correlation table.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Reference annotation for agreement statistics.
    #[arg(long, requires = "annotations")]
    annotations_ref: Option<PathBuf>,
    /// Annotation compared against --annotations-ref.
    #[arg(long, requires = "annotations_ref")]
    annotations: Option<PathBuf>,
    /// Thresholds to sweep [default: 0, 0.05, ..., 1].
    #[arg(long, value_delimiter = ',')]
    t_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 5])]
    k_list: Vec<usize>,
    /// Truth labels kept per neuron for P@K/R@K (0 keeps all).
    #[arg(long, default_value_t = 3)]
    truth_top: usize,
    /// Labels for descriptor-level Jaccard [default: all assigned labels].
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// Synth spec JSON; omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip replay fixtures, embeddings and label map.
    #[arg(long)]
    no_fixtures: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// Split corpus, for the per-split descriptor distribution.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Raised for argument combinations clap cannot check; exits with 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match config::inject(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_usage() { 1 } else { 2 });
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(2)
        }
    }
}

/// Error chain on one line, skipping causes already quoted by their parent.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}
