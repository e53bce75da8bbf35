mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use asf_core::fusion::FusionKind;
use asf_core::model::{BranchKind, ModelConfig, Overrides};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default CIFAR-10 binary directory.
pub const DATA_ENV: &str = "ASF_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "asf", version, about = "Adaptive split-fusion transformer: audit, gradient checks, training, evaluation and gate analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print per-layer and total params/MACs plus the token trace; no weights are allocated.
    Describe {
        #[command(flatten)]
        model: ModelArgs,
        /// Emit the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of every op, branch, fusion kind and the tiny model.
    Gradcheck {
        /// Check in f64 (h=1e-6, tolerance 1e-5) instead of f32 (h=1e-4, tolerance 1e-3).
        #[arg(long)]
        f64: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates sampled per parameter tensor of the full model.
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
        coords_per_tensor: u64,
        /// Adds an op with a deliberately wrong backward rule.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train on CIFAR-10 (or synthetic images) and write a checkpoint.
    Train(TrainArgs),
    /// Top-1/top-5 accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// When given (with any overrides), must match the checkpoint's model.
        #[arg(long)]
        variant: Option<Variant>,
        #[command(flatten)]
        overrides: OverrideArgs,
        /// Use the moving-average weights.
        #[arg(long)]
        ema: bool,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
        batch_size: u64,
    },
    /// Per-depth and per-category statistics of the adaptive fusion weights.
    AnalyzeAlpha {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Depth whose categories are ranked.
        #[arg(long, default_value_t = asf_core::analysis::DEFAULT_DEPTH)]
        depth: usize,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        ema: bool,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
        batch_size: u64,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Variant {
    S,
    B,
    Tiny,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Branch {
    Pcm,
    Bottleneck,
    Hmcb,
    AttentionOnly,
    HmcbOnly,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Fusion {
    Simple,
    ContextAgnostic,
    Adaptive,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug, Clone, Default)]
struct OverrideArgs {
    #[arg(long)]
    branch: Option<Branch>,
    #[arg(long)]
    fusion: Option<Fusion>,
    #[arg(long)]
    shortcut: Option<Switch>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "s")]
    variant: Variant,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// CIFAR-10 binary batch file or directory (default: $ASF_DATA_DIR).
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use N synthetic class-structured images instead of CIFAR-10.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    synthetic: Option<u64>,
    /// Seed of the synthetic images.
    #[arg(long, default_value_t = 0, requires = "synthetic")]
    data_seed: u64,
    /// Use only the first N samples.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    limit: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "tiny")]
    variant: Variant,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-epoch metrics log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(2..))]
    batch_size: u64,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    warmup_epochs: usize,
    #[arg(long, default_value_t = 0.999)]
    ema_decay: f64,
    /// Disable random flip and pad-crop.
    #[arg(long)]
    no_augment: bool,
}

impl Variant {
    fn config(self) -> ModelConfig {
        match self {
            Variant::S => ModelConfig::small(),
            Variant::B => ModelConfig::base(),
            Variant::Tiny => ModelConfig::tiny(),
        }
    }
}

impl OverrideArgs {
    fn resolve(&self) -> Overrides {
        Overrides {
            branch: self.branch.map(|b| match b {
                Branch::Pcm => BranchKind::Pcm,
                Branch::Bottleneck => BranchKind::Bottleneck,
                Branch::Hmcb => BranchKind::Hmcb,
                Branch::AttentionOnly => BranchKind::AttentionOnly,
                Branch::HmcbOnly => BranchKind::HmcbOnly,
            }),
            fusion: self.fusion.map(|f| match f {
                Fusion::Simple => FusionKind::Simple,
                Fusion::ContextAgnostic => FusionKind::ContextAgnostic,
                Fusion::Adaptive => FusionKind::Adaptive,
            }),
            shortcut: self.shortcut.map(|s| s == Switch::On),
        }
    }

    fn is_empty(&self) -> bool {
        self.branch.is_none() && self.fusion.is_none() && self.shortcut.is_none()
    }
}

/// Rejected before any work is done; exits 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
