use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

mod commands;
mod output;

/// Scene-graph perturbation and evaluation toolkit.
#[derive(Debug, Parser)]
#[command(name = "sgaug", version, about)]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Write reports as CSV instead of JSON.
    #[arg(long, global = true)]
    csv: bool,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Triplet frequencies, predicate frequencies and marginal histograms.
    Stats(StatsArgs),
    /// Split a test set into zero-, 10-, 100- and all-shot subsets.
    Subsets(SubsetsArgs),
    /// Perturb node categories of a dataset.
    Perturb(PerturbArgs),
    /// Share of perturbed triplets found in each test subset.
    HitRate(HitRateArgs),
    /// Masked-LM plausibility of (perturbed) graphs.
    Plausibility(PlausibilityArgs),
    /// Triplet recall of predictions against ground truth.
    Eval(EvalArgs),
    /// k-NN precision/recall/density/coverage between feature sets.
    FeatMetrics(FeatMetricsArgs),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Rows per histogram in CSV output.
    #[arg(long, default_value_t = 25)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct SubsetsArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct PerturbParams {
    /// rand, neigh, graphn or oracle_zs.
    #[arg(long, default_value = "graphn")]
    pub method: String,
    /// Fraction of nodes to perturb per graph.
    #[arg(long, default_value_t = 0.2)]
    pub intensity: f64,
    /// Semantic neighbours per draw (default 10 for neigh, 5 otherwise).
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Minimum mean triplet count for a GraphN candidate.
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Word embeddings (neigh, graphn).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Training split for the triplet frequency table (graphn).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// `subset_triplets.json`; its `zs` list drives oracle_zs.
    #[arg(long)]
    pub zs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub params: PerturbParams,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Perturbed dataset (JSON Lines).
    #[arg(long)]
    pub out: PathBuf,
    /// One record per perturbed graph (JSON Lines).
    #[arg(long)]
    pub records: PathBuf,
}

#[derive(Debug, Args)]
pub struct HitRateArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// `subset_triplets.json` from the subsets command.
    #[arg(long)]
    pub subsets: PathBuf,
    #[arg(long, required_unless_present = "sweep_alpha")]
    pub records: Option<PathBuf>,
    #[arg(long, required_unless_present = "sweep_alpha")]
    pub perturbed: Option<PathBuf>,
    /// Perturb `--input` once per listed α and report one row per α.
    #[arg(long, value_delimiter = ',', requires = "input")]
    pub sweep_alpha: Option<Vec<f64>>,
    /// Graphs to perturb in sweep mode.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub params: PerturbParams,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlausibilityArgs {
    #[arg(long)]
    pub graphs: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Perturbation records; the masked node is then a perturbed one.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Scoring service base URL.
    #[arg(long, env = "SGG_LM_ENDPOINT")]
    pub endpoint: Option<String>,
    /// Score offline with ln(1 + training count) from this training split.
    #[arg(long, conflicts_with = "endpoint")]
    pub stub_frequency: Option<PathBuf>,
    #[arg(long, default_value = sgaug_core::quality::DEFAULT_MASK_TOKEN)]
    pub mask_token: String,
    #[arg(long, default_value_t = 10_000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 2)]
    pub retries: usize,
    #[arg(long, default_value_t = 200)]
    pub backoff_ms: u64,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// sgcls, predcls or sggen.
    #[arg(long, default_value = "sgcls")]
    pub mode: String,
    /// Triplets kept per image (default 100 for sgcls/sggen, 50 for predcls).
    #[arg(short = 'k', long)]
    pub k: Option<usize>,
    /// Rank every predicate of every pair, not only the best one.
    #[arg(long)]
    pub no_graph_constraint: bool,
    /// Restrict ground truth to one bucket (zs, few10, few100, all).
    #[arg(long, requires = "subsets")]
    pub subset: Option<String>,
    #[arg(long)]
    pub subsets: Option<PathBuf>,
    /// Reweight predicate scores by (1/f_r)^x.
    #[arg(long, requires = "train")]
    pub reweight_x: Option<f64>,
    /// Training split for predicate frequencies.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// image or triplet.
    #[arg(long, default_value = "image")]
    pub aggregate: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeatMetricsArgs {
    /// Reference features of the first condition.
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub fake: PathBuf,
    /// Reference and generated features of a second condition.
    #[arg(long, requires = "fake_b")]
    pub real_b: Option<PathBuf>,
    #[arg(long, requires = "real_b")]
    pub fake_b: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "test,test-zs")]
    pub conditions: Vec<String>,
    #[arg(long, default_value = "features")]
    pub label: String,
    #[arg(short = 'k', long, default_value_t = sgaug_core::featmetrics::DEFAULT_K)]
    pub k: usize,
    /// Also report the Fréchet distance per condition.
    #[arg(long)]
    pub frechet: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub struct Globals {
    pub csv: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            error!("--jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            error!("{e}");
            return ExitCode::from(1);
        }
    }

    let g = Globals { csv: cli.csv };
    let result = match cli.command {
        Command::Stats(a) => commands::stats(&a, &g),
        Command::Subsets(a) => commands::subsets(&a, &g),
        Command::Perturb(a) => commands::perturb(&a, &g),
        Command::HitRate(a) => commands::hit_rate(&a, &g),
        Command::Plausibility(a) => commands::plausibility(&a, &g),
        Command::Eval(a) => commands::eval(&a, &g),
        Command::FeatMetrics(a) => commands::feat_metrics(&a, &g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{}", commands::describe(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
