use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use overseg::cli::{cmd_correct, cmd_evaluate, cmd_screen, cmd_train, Overrides, PipelineConfig};

/// Detect and repair oversegmented cells in 3D instance-label volumes.
#[derive(Parser)]
#[command(name = "overseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonFlags {
    /// config file (JSON); flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// input label volume (.lbl or .tif); repeatable for `train`
    #[arg(long)]
    input: Vec<PathBuf>,
    /// ground-truth label volume
    #[arg(long)]
    gt: Option<PathBuf>,
    /// trained model file
    #[arg(long)]
    model: Option<PathBuf>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed; required, no wall-clock default
    #[arg(long)]
    seed: Option<u64>,
    /// feature layout: default | incomplete | extra | perturbed
    #[arg(long)]
    variant: Option<String>,
    /// maximum gap (in layers) between candidate fragments
    #[arg(long)]
    max_gap: Option<usize>,
    /// projection count for the sliced divergence estimator
    #[arg(long)]
    projections: Option<usize>,
    /// merge decision threshold on the classifier probability
    #[arg(long)]
    threshold: Option<f64>,
    /// evaluate arbitrary-orientation cuts instead of the axis path
    #[arg(long)]
    tilted: bool,
    /// compute decisions without writing any volume
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// List oversegmentation candidates with their feature vectors
    Screen(CommonFlags),
    /// Synthesize a training set from ground truth and train a classifier
    Train(CommonFlags),
    /// Screen, classify, and repair a volume
    Correct(CommonFlags),
    /// Compare a predicted volume against ground truth
    Evaluate(CommonFlags),
}

fn overrides(f: &CommonFlags) -> Overrides {
    Overrides {
        inputs: f.input.clone(),
        gt: f.gt.clone(),
        model: f.model.clone(),
        out: f.out.clone(),
        seed: f.seed,
        variant: f.variant.clone(),
        max_gap: f.max_gap,
        projections: f.projections,
        threshold: f.threshold,
        tilted: f.tilted,
        dry_run: f.dry_run,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let flags = match &cli.command {
        Command::Screen(f) | Command::Train(f) | Command::Correct(f) | Command::Evaluate(f) => f,
    };
    let config = match PipelineConfig::resolve(flags.config.as_deref(), &overrides(flags)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match &cli.command {
        Command::Screen(_) => cmd_screen(&config).map(|_| ()),
        Command::Train(_) => cmd_train(&config).map(|_| ()),
        Command::Correct(_) => cmd_correct(&config).map(|_| ()),
        Command::Evaluate(_) => cmd_evaluate(&config).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
