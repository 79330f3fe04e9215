use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use latte_cli::analyze::{analyze, parse_variants, Source};
use latte_cli::sample::{sample, SampleArgs};
use latte_cli::train::train;
use latte_cli::{run_verify, CliError, CliResult, NumericMode, RunConfig};
use latte_core::backbone::LatteSize;

#[derive(Parser)]
#[command(name = "latte", version, about = "Latent video diffusion transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw clips from a checkpoint (EMA weights unless --raw).
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        raw: bool,
    },
    /// Parameter and FLOP accounting per variant.
    #[command(group(ArgGroup::new("source").required(true).args(["config", "paper_config"])))]
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Size preset: s, b, l or xl.
        #[arg(long)]
        paper_config: Option<String>,
        #[arg(long, default_value = "1,2,3,4")]
        variants: String,
        #[arg(long)]
        json: bool,
    },
    /// Gradient, oracle and invariant suites.
    Verify {
        #[arg(long)]
        filter: Option<String>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config } => {
            let config = RunConfig::load(&config)?;
            let summary = match NumericMode::from_env()? {
                NumericMode::F32 => train::<f32>(&config)?,
                NumericMode::F64 => train::<f64>(&config)?,
            };
            println!(
                "trained steps {}..{}; checkpoint {}",
                summary.start_step,
                summary.final_step,
                summary.final_checkpoint.display()
            );
        }
        Command::Sample {
            ckpt,
            count,
            seed,
            out,
            raw,
        } => {
            let args = SampleArgs {
                ckpt,
                count,
                seed,
                out,
                raw,
            };
            let report = match NumericMode::from_env()? {
                NumericMode::F32 => sample::<f32>(&args)?,
                NumericMode::F64 => sample::<f64>(&args)?,
            };
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?);
        }
        Command::Analyze {
            config,
            paper_config,
            variants,
            json,
        } => {
            let variants = parse_variants(&variants)?;
            let source = match (&config, &paper_config) {
                (Some(path), _) => Source::Config(path),
                (None, Some(name)) => Source::Preset(
                    LatteSize::parse(name).ok_or_else(|| CliError::Config(format!("unknown preset `{name}`")))?,
                ),
                (None, None) => unreachable!("clap requires one source"),
            };
            let analysis = analyze(source, &variants)?;
            if json {
                println!("{}", analysis.to_json());
            } else {
                print!("{}", analysis.to_text());
            }
        }
        Command::Verify { filter } => {
            run_verify(filter.as_deref(), &mut std::io::stdout().lock())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("latte: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
