use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mgd_cli::heatmap::dump_feature_heatmap;
use mgd_cli::{compare, run, CliError, ExperimentConfig, RunOptions, EXIT_RUNTIME};

#[derive(Parser)]
#[command(name = "mgd", version, about = "Masked generative distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the task described by an experiment config.
    Run {
        config: PathBuf,
        /// Suppress per-epoch progress on stderr.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Tabulate result.json of several run directories.
    Compare {
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a stage activation heatmap of one validation image as PGM.
    Heatmap {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        stage: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    mgd_core::parallel::init_from_env();
    match cli.command {
        Command::Run { config, quiet } => {
            let outcome = ExperimentConfig::load(&config).and_then(|cfg| run(&cfg, RunOptions { progress: !quiet }));
            match outcome {
                Ok(o) => {
                    for (name, r) in &o.runs {
                        let fd = r.feature_diff.map(|v| format!(", feature_diff {v:.4}")).unwrap_or_default();
                        println!("{name}: top1 {:.2}{fd}", r.top1);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Compare { dirs, out } => match compare(&dirs, &out) {
            Ok(o) => {
                for (dir, why) in &o.missing {
                    eprintln!("skipped {}: {why}", dir.display());
                }
                if o.missing.is_empty() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
            Err(e) => fail(e),
        },
        Command::Heatmap {
            checkpoint,
            config,
            index,
            stage,
            out,
        } => match dump_feature_heatmap(&checkpoint, &config, index, &stage, &out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
    }
}
