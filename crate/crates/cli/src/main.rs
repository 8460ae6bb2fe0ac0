use clap::{Parser, Subcommand};
use sta_cli::commands::{
    cmd_bary, cmd_bench, cmd_bound, cmd_dist, cmd_forecast, cmd_gen, BaryArgs, BaryMethod,
    BenchArgs, BoundArgs, DistArgs, ForecastArgs, GenArgs, LossArg,
};
use sta_cli::config::{resolve, CommonArgs};
use std::path::PathBuf;
use std::process::ExitCode;

/// Spatio-temporal averaging of measure-valued time series: Soft-DTW
/// alignment over debiased unbalanced optimal transport.
#[derive(Parser, Debug)]
#[command(name = "sta", version, about)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic moving-blob dataset (STSD container).
    Gen {
        /// Number of trajectory classes.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Samples per class.
        #[arg(long, default_value_t = 25)]
        per_class: usize,
        /// Frames per series.
        #[arg(long, default_value_t = 13)]
        t: usize,
        /// Largest spatial shift, in cells, per axis.
        #[arg(long, default_value_t = 10)]
        shift_max: usize,
        /// Smallest temporal crop length.
        #[arg(long, default_value_t = 5)]
        crop_min: usize,
        /// Destination file.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Print STA / transport / Euclidean distances between two samples.
    Dist {
        /// STSD dataset.
        #[arg(long)]
        input: PathBuf,
        #[arg(short)]
        i: usize,
        #[arg(short)]
        j: usize,
        /// CSV destination (stdout when omitted).
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Barycenter of selected samples, written as a single-series STSD file.
    Bary {
        #[arg(long, short)]
        input: PathBuf,
        /// Comma-separated sample indices (all when omitted).
        #[arg(long, value_delimiter = ',')]
        indices: Vec<usize>,
        #[arg(long, value_enum)]
        method: BaryMethod,
        /// Output series length (STA method only; defaults to the input length).
        #[arg(long)]
        t_out: Option<usize>,
        #[arg(long, short)]
        output: PathBuf,
        /// Also write the per-frame l2-norm profile CSV here.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Measured Soft-DTW shift gaps of a Dirac pair against the analytic
    /// lower bound, as CSV.
    Bound {
        /// Series length.
        #[arg(long, default_value_t = 100)]
        t: usize,
        /// Position of the impulse in the reference series (1-based).
        #[arg(long, default_value_t = 30)]
        t_star: usize,
        /// Explicit temperatures.
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
        /// Temperatures via the saturation heuristic at these target shifts.
        #[arg(long, value_delimiter = ',')]
        kmax_list: Vec<usize>,
        /// Heuristic slack.
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        /// Largest shift to evaluate.
        #[arg(long, default_value_t = 60)]
        shifts: usize,
        /// Impulse amplitude (r = amplitude^2).
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Nearest-neighbor forecasting: predictions STSD plus per-query scores.
    Forecast {
        #[arg(long, short)]
        input: PathBuf,
        /// Observed prefix length.
        #[arg(long, default_value_t = 5)]
        t0: usize,
        /// Neighbor count.
        #[arg(long, short, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value_t = LossArg::Sta)]
        loss: LossArg,
        /// Query indices (all samples when omitted).
        #[arg(long, value_delimiter = ',')]
        queries: Vec<usize>,
        /// Predictions file.
        #[arg(long)]
        output_pred: PathBuf,
        /// Scores CSV (stdout when omitted).
        #[arg(long)]
        output_scores: Option<PathBuf>,
    },
    /// Time the main solver components, as CSV.
    Bench {
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

fn run() -> sta_cli::Result<()> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 by default; usage problems are exit 1 here.
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cfg = resolve(&cli.common)?;
    if cfg.threads > 0 {
        // Ignore the error if a pool already exists (tests, repeated init).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match cli.command {
        Command::Gen { classes, per_class, t, shift_max, crop_min, output } => cmd_gen(
            &cfg,
            &GenArgs {
                classes,
                per_class,
                t,
                spatial_shift_max: shift_max,
                temporal_crop_min: crop_min,
                output,
            },
        ),
        Command::Dist { input, i, j, output } => cmd_dist(&cfg, &DistArgs { input, i, j, output }),
        Command::Bary { input, indices, method, t_out, output, profile } => {
            cmd_bary(&cfg, &BaryArgs { input, indices, method, t_out, output, profile })
        }
        Command::Bound { t, t_star, betas, kmax_list, eta, shifts, amplitude, output } => {
            cmd_bound(&BoundArgs { t, t_star, betas, kmax_list, eta, shifts, amplitude, output })
        }
        Command::Forecast { input, t0, k, loss, queries, output_pred, output_scores } => {
            cmd_forecast(
                &cfg,
                &ForecastArgs { input, t0, k, loss, queries, output_pred, output_scores },
            )
        }
        Command::Bench { output } => cmd_bench(&cfg, &BenchArgs { output }),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
