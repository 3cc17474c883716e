use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use pdtr_cli::commands;
use pdtr_cli::error::{EXIT_OK, EXIT_USAGE};
use pdtr_cli::{CliError, Overrides, RunConfig};
use pdtr_core::backbone::BackboneKind;

#[derive(Parser)]
#[command(
    name = "pdtr",
    version,
    about = "Detection transformer for noisy single-channel security imagery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; flags override its entries
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Initialise anchors from encoder proposals
    #[arg(long, global = true, value_name = "BOOL", action = ArgAction::Set)]
    use_qse: Option<bool>,

    /// Feed refined anchors to the classification branch
    #[arg(long, global = true, value_name = "BOOL", action = ArgAction::Set)]
    use_qsh: Option<bool>,

    #[arg(long, global = true, value_enum)]
    backbone: Option<BackboneArg>,

    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackboneArg {
    Dcft,
    Plain,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Synth {
        /// Number of scenes
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a dataset and write checkpoints and a loss log
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint or a detections file against a dataset
    Eval {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE", conflicts_with = "checkpoint")]
        detections: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Print attention cost formulas and counted multiply-accumulates
    Bench,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        use_qse: cli.use_qse,
        use_qsh: cli.use_qsh,
        backbone: cli.backbone.map(|b| match b {
            BackboneArg::Dcft => BackboneKind::Dcft,
            BackboneArg::Plain => BackboneKind::Plain,
        }),
    });
    cfg.validate()?;
    let stdout = io::stdout();
    let mut w = stdout.lock();
    let out = cli.out;
    let out_or = |d: &str| out.clone().unwrap_or_else(|| PathBuf::from(d));
    match cli.command {
        Command::Synth { count } => {
            commands::synth(&cfg, &out_or("pdtr-data"), count.unwrap_or(cfg.data.count), &mut w)
        }
        Command::Train { data } => commands::train(&cfg, data, &out_or("pdtr-train"), &mut w),
        Command::Eval {
            data,
            checkpoint,
            detections,
        } => commands::eval(&cfg, data, checkpoint, detections, &out_or("pdtr-eval"), &mut w),
        Command::Gradcheck { corrupt_backward } => commands::gradcheck(&cfg, corrupt_backward, out.as_deref(), &mut w),
        Command::Bench => commands::bench(&cfg, out.as_deref(), &mut w),
    }?;
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK } as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pdtr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
