use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use encnet_cli::{commands, exit_code, Report, RunConfig, CHECK_FAILED};

#[derive(Parser)]
#[command(name = "encnet", version, about = "Context encoding networks: training, evaluation and self-checks")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set optim.epochs=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point width: 32 or 64.
    #[arg(long, global = true)]
    precision: Option<usize>,
    /// Simulated synchronized batch-norm devices.
    #[arg(long, global = true)]
    devices: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference checks of every differentiable module (64-bit only).
    Gradcheck,
    /// Generate the synthetic context-dependent segmentation dataset.
    SynthGen,
    /// Train a segmentation network on the synthetic dataset.
    TrainSeg,
    /// Train a CIFAR-10 classifier from the binary batch files.
    TrainCifar,
    /// Evaluate a checkpoint written by a training command.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated evaluation scales.
        #[arg(long)]
        scales: Option<String>,
        /// Average with horizontally mirrored predictions.
        #[arg(long)]
        flip: bool,
    },
    /// Compare sharded batch norm with the single-batch result for 1..=devices shards.
    SyncbnVerify,
    /// Parameter counts and forward time of the FCN and EncNet heads.
    Bench,
}

fn flag_overrides(cli: &Cli) -> Vec<String> {
    let mut v = cli.overrides.clone();
    if let Some(s) = cli.seed {
        v.push(format!("seed={s}"));
    }
    if let Some(p) = cli.precision {
        v.push(format!("precision={p}"));
    }
    if let Some(d) = cli.devices {
        v.push(format!("syncbn.devices={d}"));
    }
    if let Some(o) = &cli.out {
        v.push(format!("out.dir={}", o.display()));
    }
    v
}

fn resolve(cli: &Cli, overrides: &[String]) -> encnet::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> encnet::Result<Report> {
    let mut overrides = flag_overrides(cli);
    match &cli.command {
        Command::Gradcheck => {
            if cli.precision.is_some_and(|p| p != 64) {
                return Err(encnet::Error::Config("gradient checks run in 64-bit only; pass --precision 64".into()));
            }
            commands::gradcheck(cli.seed.unwrap_or(0))
        }
        Command::SyncbnVerify => commands::syncbn_verify(cli.devices.unwrap_or(4), cli.seed.unwrap_or(0)),
        Command::SynthGen => commands::synth_gen(&resolve(cli, &overrides)?),
        Command::TrainSeg => commands::train_seg_command(&resolve(cli, &overrides)?),
        Command::TrainCifar => commands::train_cifar_command(&resolve(cli, &overrides)?),
        Command::Bench => commands::bench(&resolve(cli, &overrides)?),
        Command::Eval { checkpoint, scales, flip } => {
            if let Some(s) = scales {
                overrides.push(format!("eval.scales={s}"));
            }
            if *flip {
                overrides.push("eval.flip=true".into());
            }
            commands::eval(checkpoint, &overrides)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            print!("{}", report.text);
            if report.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("check failed");
                ExitCode::from(CHECK_FAILED as u8)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
