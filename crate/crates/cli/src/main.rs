use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gradmatch_cli::commands::{
    cmd_evaluate, cmd_fit, cmd_replicate, cmd_simulate, ReplicatePreset, SimulatePreset, SimulateSource, REPLICATE_SEEDS,
};
use gradmatch_cli::{CliError, CliResult};

/// Log verbosity, e.g. `GRADMATCH_LOG=info`.
const LOG_ENV: &str = "GRADMATCH_LOG";

#[derive(Parser)]
#[command(name = "gradmatch", version, about = "Variational gradient matching for mass-action ODEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a noisy dataset and its ground truth.
    Simulate {
        #[arg(long, value_enum, conflicts_with = "config", required_unless_present = "config")]
        preset: Option<SimPresetArg>,
        /// Experiment config with a `[data.simulate]` table.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Observation noise variance (preset only).
        #[arg(long, requires = "preset")]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to data as described by an experiment config.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a result document against a truth sidecar.
    Evaluate {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a replication preset over fixed seeds.
    Replicate {
        #[arg(long, value_enum)]
        preset: ReplicatePresetArg,
        /// Run only this seed instead of the fixed set.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SimPresetArg {
    LotkaVolterra,
    Protein,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReplicatePresetArg {
    #[value(name = "lv-0.1")]
    Lv01,
    #[value(name = "lv-0.25")]
    Lv025,
    Protein,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate {
            preset,
            config,
            noise,
            seed,
            out,
        } => {
            let source = match (preset, config) {
                (Some(p), _) => SimulateSource::Preset {
                    preset: match p {
                        SimPresetArg::LotkaVolterra => SimulatePreset::LotkaVolterra,
                        SimPresetArg::Protein => SimulatePreset::Protein,
                    },
                    noise,
                },
                (None, Some(c)) => SimulateSource::Config(c),
                (None, None) => unreachable!("clap requires --preset or --config"),
            };
            for path in cmd_simulate(&source, seed, &out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Fit { config, seed, out } => {
            let report = cmd_fit(&config, seed, out.as_deref())?;
            for path in &report.written {
                println!("wrote {}", path.display());
            }
            let doc = &report.document;
            println!("theta mean {:?}", doc.theta.mean);
            println!("theta std  {:?}", doc.theta.std);
            if !doc.converged {
                return Err(CliError::NotConverged(doc.iterations));
            }
        }
        Command::Evaluate { result, truth, out } => {
            let (metrics, path) = cmd_evaluate(&result, &truth, &out)?;
            println!("wrote {}", path.display());
            println!("relative error {:?}", metrics.rel_error);
            println!("spearman {:?}", metrics.spearman);
        }
        Command::Replicate { preset, seed, out } => {
            let preset = match preset {
                ReplicatePresetArg::Lv01 => ReplicatePreset::Lv01,
                ReplicatePresetArg::Lv025 => ReplicatePreset::Lv025,
                ReplicatePresetArg::Protein => ReplicatePreset::Protein,
            };
            let seeds = seed.map_or(REPLICATE_SEEDS.to_vec(), |s| vec![s]);
            let summary = cmd_replicate(preset, &seeds, &out)?;
            for check in &summary.checks {
                println!("{} {}: {}", if check.passed { "PASS" } else { "FAIL" }, check.name, check.detail);
            }
            if !summary.all_converged() {
                return Err(CliError::NotConverged(gradmatch_cli::commands::PRESET_MAX_ITER));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
