use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pcroute::checkpoint::Phase;
use pcroute::config::ExperimentConfig;
use pcroute::{experiment, Error};

#[derive(Parser)]
#[command(name = "pcroute", version, about = "Personalized context-aware route planning")]
struct Cli {
    /// experiment TOML; a grid4x4 default is used when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides the seed in the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory (default: config `out`, then `runs/`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Generic,
    Preference,
}

#[derive(Subcommand)]
enum Command {
    /// Train the generic model or a driver preference model
    Train {
        #[arg(long, value_enum, default_value = "generic")]
        phase: PhaseArg,
    },
    /// Answer a CSV batch of route requests
    Plan {
        /// directory of checkpoint files (default: the output directory)
        #[arg(long)]
        models: Option<PathBuf>,
        /// CSV with columns driver,source,destination,preference,t
        #[arg(long)]
        requests: PathBuf,
    },
    /// Compare checkpoints and baselines on shared evaluation seeds
    Eval,
    /// Run the traffic simulator on a demand file or random demand
    Simulate,
    /// Write a synthetic labeled trajectory history
    SynthDriver {
        /// overrides `synth.preference`
        #[arg(long)]
        preference: Option<String>,
        /// overrides `synth.noise`
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Print a checkpoint summary
    InspectCheckpoint { path: PathBuf },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::from_toml(&format!("scenario = \"grid4x4\"\nseed = {}\n", cli.seed.unwrap_or(0)))?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Command::InspectCheckpoint { path } = &cli.command {
        print_json(&experiment::inspect_checkpoint(path)?);
        return Ok(());
    }
    let mut cfg = load_config(cli)?;
    let out = cfg.out_dir(cli.out.as_deref());
    match &cli.command {
        Command::Train { phase } => {
            let phase = match phase {
                PhaseArg::Generic => Phase::Generic,
                PhaseArg::Preference => Phase::Preference,
            };
            print_json(&experiment::train_command(&cfg, phase, &out)?);
        }
        Command::Plan { models, requests } => {
            let models = models.as_deref().unwrap_or(&out);
            let (_, summary) = experiment::plan_command(&cfg, models, requests, &out)?;
            print_json(&summary);
        }
        Command::Eval => {
            let report = experiment::eval_command(&cfg, &out)?;
            print_json(&report.policies);
        }
        Command::Simulate => print_json(&experiment::simulate_command(&cfg, &out)?),
        Command::SynthDriver { preference, noise } => {
            if let Some(p) = preference {
                cfg.synth.preference = p.clone();
            }
            if let Some(n) = noise {
                cfg.synth.noise = *n;
            }
            cfg.validate()?;
            let path = experiment::synth_command(&cfg, &out)?;
            println!("{}", path.display());
        }
        Command::InspectCheckpoint { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
