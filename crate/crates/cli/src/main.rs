mod commands;
mod manifest;
mod model_file;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fpglmm::Error;

#[derive(Parser, Debug)]
#[command(name = "fpglmm", version, about = "Quality-aware PRC estimation for fingerprint matches")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "FPGLMM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mean and SD tables of Y, m_a*m_b and Y/(m_a*m_b) by quality cell.
    Summarize(SummarizeArgs),
    /// Fit the model by EM and write a model file.
    Fit(FitArgs),
    /// Draw posterior samples by importance resampling.
    Posterior(PosteriorArgs),
    /// PRC estimate with a credible interval, or a grid over quality labels.
    Prc(PrcArgs),
    /// Smallest w whose posterior-mean PRC is at most a target.
    DesignW(DesignArgs),
    /// Count minutia matches between impressions.
    Match(MatchArgs),
    /// Simulate a match table from a preset.
    Simulate(SimulateArgs),
    /// Coverage study: simulate, fit and sample repeatedly.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
pub struct SummarizeArgs {
    pub matches: PathBuf,
    /// `categorical:<qmax>` or `continuous`.
    #[arg(long)]
    pub scheme: String,
    /// Bin width for continuous quality.
    #[arg(long, default_value_t = 0.1)]
    pub bin_width: f64,
    /// Directory for summary_y.csv, summary_mm.csv and summary_ratio.csv.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    pub matches: PathBuf,
    #[arg(long)]
    pub scheme: String,
    /// Starting values, comma separated in parameter order.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub init: Option<Vec<f64>>,
    /// Hold a parameter at a value, e.g. `beta0=-2.73` (repeatable).
    #[arg(long = "hold", allow_hyphen_values = true)]
    pub hold: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PosteriorArgs {
    #[arg(long)]
    pub model: PathBuf,
    pub matches: PathBuf,
    #[arg(long = "H", default_value_t = fpglmm::bayes::DEFAULT_H)]
    pub h: usize,
    #[arg(long = "R", default_value_t = fpglmm::bayes::DEFAULT_R)]
    pub r: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "samples.csv")]
    pub out: PathBuf,
    /// Also write the H importance weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PrcArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub w: u32,
    #[arg(long)]
    pub m1: u32,
    #[arg(long)]
    pub m2: u32,
    #[arg(long, required_unless_present = "grid")]
    pub q1: Option<f64>,
    #[arg(long, required_unless_present = "grid")]
    pub q2: Option<f64>,
    /// Report over every pair of these quality values instead of one (q1, q2).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = fpglmm::prc::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = fpglmm::prc::DEFAULT_MC_DRAWS)]
    pub mc: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// CSV report (one row per quality pair).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DesignArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub m1: u32,
    #[arg(long)]
    pub m2: u32,
    #[arg(long)]
    pub target: f64,
    /// Quality values for the table (default: every categorical label).
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<f64>>,
    #[arg(long, default_value_t = fpglmm::prc::DEFAULT_MC_DRAWS)]
    pub mc: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    /// Minutia CSV files (`finger,impression,x,y,direction`).
    #[arg(required = true)]
    pub minutiae: Vec<PathBuf>,
    /// Quality CSV (`finger,impression,quality`); builds a full match table.
    #[arg(long, requires_all = ["scheme", "out"])]
    pub quality: Option<PathBuf>,
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Distance tolerance (pixels).
    #[arg(long, default_value_t = 15.0)]
    pub r0: f64,
    /// Direction tolerance (radians).
    #[arg(long, default_value_t = std::f64::consts::PI / 8.0)]
    pub u0: f64,
    /// Compare raw coordinates without searching alignments.
    #[arg(long)]
    pub no_align: bool,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// db1-cat, db1-cont, db2-cat or db2-cont.
    #[arg(long)]
    pub preset: String,
    #[arg(long, default_value_t = 50)]
    pub fingers: usize,
    #[arg(long, default_value_t = 4)]
    pub impressions: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "matches.csv")]
    pub out: PathBuf,
    /// Also write the hidden effects and type counts.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    pub preset: String,
    #[arg(long, default_value_t = 50)]
    pub fingers: usize,
    #[arg(long, default_value_t = 4)]
    pub impressions: usize,
    #[arg(long, default_value_t = 50)]
    pub runs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long = "H", default_value_t = fpglmm::bayes::DEFAULT_H)]
    pub h: usize,
    #[arg(long = "R", default_value_t = fpglmm::bayes::DEFAULT_R)]
    pub r: usize,
    #[arg(long, default_value_t = fpglmm::prc::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// PRC query `w,m1,m2,q1,q2` whose interval coverage is also tallied (repeatable).
    #[arg(long = "query")]
    pub queries: Vec<String>,
    /// Monte Carlo draws per posterior draw for PRC intervals.
    #[arg(long, default_value_t = 20_000)]
    pub mc: usize,
    /// Monte Carlo draws for the true PRC.
    #[arg(long, default_value_t = 1_000_000)]
    pub truth_mc: usize,
    /// Hold a parameter at its true value in every fit (repeatable).
    #[arg(long = "hold")]
    pub hold: Vec<String>,
    #[arg(long, default_value = "coverage.csv")]
    pub out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Input { .. } | Error::Config(_) | Error::Refused(_) | Error::Io(_) | Error::Csv(_) => 2,
        Error::Boundary(_) => 3,
        Error::Solver { .. } | Error::Numerical(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not set thread count: {e}");
        }
    }
    let result = match cli.command {
        Command::Summarize(a) => commands::summarize(a),
        Command::Fit(a) => commands::fit(a),
        Command::Posterior(a) => commands::posterior(a),
        Command::Prc(a) => commands::prc(a),
        Command::DesignW(a) => commands::design_w(a),
        Command::Match(a) => commands::match_minutiae(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Validate(a) => commands::validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
