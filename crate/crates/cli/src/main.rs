use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;
mod run;
mod traces;

use chansearch::search::{Algorithm, Granularity};
use error::CliError;
use run::TrainerSpec;

#[derive(Debug, Parser)]
#[command(name = "chansearch", version, about = "Channel-size search for convolutional networks")]
struct Cli {
    /// More log output on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extracts channel dependency groups from a graph.
    ExtractDeps {
        graph: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Also writes the channel-size diagram as DOT.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Scores every channel endpoint of a weights container.
    Metric {
        graph: PathBuf,
        weights: PathBuf,
        /// Rank threshold relative to the largest singular value.
        #[arg(long, default_value_t = chansearch::metric::DEFAULT_RANK_THRESHOLD)]
        tau: f64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Runs a channel-size search and writes a run directory.
    Search(SearchArgs),
    /// Re-runs the search recorded in a run manifest.
    Replay {
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Flattens the traces of a run directory to CSV.
    ExportTraces {
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        what: TraceKind,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceKind {
    MetricEvolution,
    Cumulative,
    ChannelEvolution,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    pub graph: PathBuf,
    /// Starting weights; seeded random weights at `--init-size` otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// JSON search configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory to create.
    #[arg(short, long)]
    pub out: PathBuf,
    /// `toy`, `external:DIR` or `mock:SURFACE.json`.
    #[arg(long, default_value = "toy")]
    pub trainer: TrainerSpec,
    /// Seconds to wait for an external trainer per trial.
    #[arg(long, default_value_t = 3600.0)]
    pub timeout: f64,
    /// greedy, sa, random or compound.
    #[arg(long, value_parser = parse_algorithm)]
    pub algorithm: Option<Algorithm>,
    /// Momentum factor.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Annealing strength.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Number of search trials.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Training epochs per trial.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Channel count of every searchable group at the start.
    #[arg(long)]
    pub init_size: Option<usize>,
    /// Width multiplier for the compound baseline.
    #[arg(long)]
    pub width_mult: Option<f64>,
    /// Rank threshold relative to the largest singular value.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Smallest channel count a group may shrink to.
    #[arg(long)]
    pub min_channel: Option<usize>,
    /// per-trial or per-group training.
    #[arg(long, value_parser = parse_granularity)]
    pub granularity: Option<Granularity>,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: chansearch::Error| e.to_string())
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    s.parse().map_err(|e: chansearch::Error| e.to_string())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        2 => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::ExtractDeps { graph, out, dot } => commands::extract_deps(&graph, out.as_deref(), dot.as_deref()),
        Command::Metric { graph, weights, tau, out } => commands::metric(&graph, &weights, tau, out.as_deref()),
        Command::Search(args) => commands::search(&args),
        Command::Replay { manifest, out } => commands::replay(&manifest, &out),
        Command::ExportTraces { run_dir, what, out } => traces::export(&run_dir, what, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
