use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cxhg::verify::Suite;
use cxhg_cli::commands::{self, exit_code, GenDataArgs};
use cxhg_cli::config::{RunConfig, KEYS};

/// Contextual hourglass segmentation network: data, training, evaluation.
///
/// Exit status: 0 success, 1 verification failure, 2 usage, config or data
/// error, 3 numerical failure.
#[derive(Parser)]
#[command(name = "cxhg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic aerial-scene dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tiles: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take scene keys and channels from a run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        channels: Option<usize>,
        /// Standard deviation of the per-pixel image noise.
        #[arg(long)]
        noise: Option<f64>,
        /// Density multiplier of the rare class.
        #[arg(long)]
        rare_rate: Option<f64>,
    },
    /// Two-phase training; writes phase1.ckpt, final.ckpt, train_log.csv and
    /// the resolved config.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint saved at an epoch boundary.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Metrics CSV of a checkpoint over every patch of a dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run without the encoding layers (for phase-1 checkpoints).
        #[arg(long)]
        no_encoding: bool,
    },
    /// Predict a whole tile and write it as a colorized PPM.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_encoding: bool,
    },
    /// Gradient checks, encoding oracle and format round trips.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
    },
    /// Print the resolved configuration (defaults when no file is given).
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        /// List the keys with their meaning instead.
        #[arg(long)]
        keys: bool,
    },
}

fn run(cli: Cli) -> Result<(), cxhg::Error> {
    match cli.command {
        Command::GenData {
            out,
            tiles,
            width,
            height,
            seed,
            config,
            channels,
            noise,
            rare_rate,
        } => {
            let census = commands::gen_data(&GenDataArgs {
                out,
                tiles,
                width,
                height,
                seed,
                config,
                channels,
                noise,
                rare_rate,
            })?;
            print!("{census}");
        }
        Command::Train { config, out, resume } => {
            let outcome = commands::train(&config, &out, resume.as_deref(), &mut |line| eprintln!("{line}"))?;
            if let Some(last) = outcome.report.iterations.last() {
                eprintln!("done at iteration {}: loss {:.4}", last.iter, last.loss_total);
            }
            println!("{}", outcome.final_checkpoint.display());
        }
        Command::Eval {
            config,
            ckpt,
            data,
            no_encoding,
        } => print!("{}", commands::eval(&config, &ckpt, &data, !no_encoding)?),
        Command::Predict {
            config,
            ckpt,
            input,
            out,
            no_encoding,
        } => commands::predict(&config, &ckpt, &input, &out, !no_encoding)?,
        Command::Verify { .. } => unreachable!("handled in main"),
        Command::Config { config, keys } => {
            if keys {
                for (k, help) in KEYS {
                    println!("{k:<18} {help}");
                }
            } else {
                let cfg = match config {
                    Some(p) => RunConfig::load(&p)?,
                    None => RunConfig::default(),
                };
                print!("{}", cfg.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Command::Verify { suite } = cli.command {
        let report = commands::verify(suite);
        print!("{}", report.to_text());
        return if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) };
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
