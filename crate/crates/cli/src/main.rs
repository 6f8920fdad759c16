mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Semi-supervised GAN experiments: split datasets, train, evaluate,
/// sample and verify gradients.
#[derive(Parser, Debug)]
#[command(name = "ssgan", version)]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Shared {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory (meaning depends on the command).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a class-directory tree into train/test and withhold labels.
    Split(SplitArgs),
    /// Render the procedural shapes dataset as a class-directory tree.
    Synth(SynthArgs),
    /// Train from a split manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the manifest's test split.
    Eval(EvalArgs),
    /// Write a grid of generated samples.
    Generate(GenerateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// eth, indian or fraction:P
    #[arg(long)]
    pub protocol: Option<String>,
    /// Share of each class's training labels to withhold, in [0, 1].
    #[arg(long)]
    pub unlabeled: Option<f64>,
    /// Target image shape as CxHxW, e.g. 1x16x16.
    #[arg(long)]
    pub image_shape: Option<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 500)]
    pub per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub side: usize,
    /// Comma-separated shape names; overrides --classes.
    #[arg(long, value_delimiter = ',')]
    pub shapes: Vec<String>,
    #[arg(long, value_enum, default_value_t = StyleArg::Default)]
    pub style: StyleArg,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum StyleArg {
    Default,
    /// No pixel noise.
    Clean,
    /// Heavy geometry and contrast jitter.
    Hard,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub algorithm: Option<String>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many seconds of training.
    #[arg(long)]
    pub time_budget: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// csv, json or text; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',')]
    pub format: Vec<String>,
    /// Method name printed in the report table.
    #[arg(long)]
    pub title: Option<String>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// ROWSxCOLS; defaults to the smallest square that fits.
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = PrecisionArg::Double)]
    pub precision: PrecisionArg,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Negate the analytic gradient of one check (negative control).
    #[arg(long)]
    pub inject_fault: Option<String>,
    /// Run only the named checks.
    #[arg(long)]
    pub only: Vec<String>,
    /// List check names and exit.
    #[arg(long)]
    pub list: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(commands::EXIT_VALIDATION) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Split(a) => commands::split(&cli.shared, a),
        Command::Synth(a) => commands::synth(&cli.shared, a),
        Command::Train(a) => commands::train(&cli.shared, a),
        Command::Eval(a) => commands::eval(&cli.shared, a),
        Command::Generate(a) => commands::generate(&cli.shared, a),
        Command::Gradcheck(a) => commands::gradcheck(&cli.shared, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
