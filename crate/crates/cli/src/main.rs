use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segfed_cli::commands::{cmd_partition, cmd_pretrain_teacher, cmd_report, cmd_run, VERSION};
use segfed_cli::{CliError, ExperimentConfig, Mode, Overrides};

#[derive(Parser)]
#[command(name = "segfed", version = VERSION, about = "Federated segmentation experiments with local teacher-student distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Split the corpus into per-client manifests.
    Partition,
    /// Train the teacher centrally and save its weights.
    PretrainTeacher,
    /// Run the configured experiment end to end.
    Run,
    /// Rebuild the summary table and plots of a finished run.
    Report,
}

/// Flags override the matching config fields.
#[derive(Args)]
struct Flags {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Local epochs per round; pretraining epochs for `pretrain-teacher`.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    clients: Option<usize>,
}

fn load_config(flags: &Flags, pretraining: bool) -> Result<ExperimentConfig, CliError> {
    let path = flags
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    config.apply(&Overrides {
        seed: flags.seed,
        out: flags.out.clone(),
        mode: flags.mode,
        rounds: flags.rounds,
        epochs: if pretraining { None } else { flags.epochs },
        alpha: flags.alpha,
        temperature: flags.temperature,
        clients: flags.clients,
    });
    if pretraining {
        if let (Some(e), Some(p)) = (flags.epochs, config.teacher.pretrain.as_mut()) {
            p.epochs = e;
        }
    }
    Ok(config)
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Partition => {
            cmd_partition(&load_config(&cli.flags, false)?)?;
        }
        Command::PretrainTeacher => {
            cmd_pretrain_teacher(&load_config(&cli.flags, true)?)?;
        }
        Command::Run => {
            let out = cmd_run(&load_config(&cli.flags, false)?)?;
            if let Some(acc) = out.summary.validation_accuracy {
                println!("validation pixel accuracy {acc:.4}");
            }
            println!(
                "parameter optimization {:.2}x, space optimization {:.2}x",
                out.compression.parameter_ratio, out.compression.space_ratio
            );
        }
        Command::Report => {
            let out = match &cli.flags.out {
                Some(dir) => dir.clone(),
                None => load_config(&cli.flags, false)?.out_dir,
            };
            for f in cmd_report(&out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                log::error!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
