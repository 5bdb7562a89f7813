//! `spinlat <experiment> --config <file> [--seed S] [--replicas N] [--out DIR] [--format csv|json]`

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use spinlat::experiments::{run, ExperimentConfig, Format, Kind};
use spinlat::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Experiment {
    Simulate,
    Wsm,
    Survival,
    Stability,
    Identities,
    Badbox,
}

impl From<Experiment> for Kind {
    fn from(e: Experiment) -> Kind {
        match e {
            Experiment::Simulate => Kind::Simulate,
            Experiment::Wsm => Kind::Wsm,
            Experiment::Survival => Kind::Survival,
            Experiment::Stability => Kind::Stability,
            Experiment::Identities => Kind::Identities,
            Experiment::Badbox => Kind::Badbox,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "spinlat", version, about = "Graphical-construction spin dynamics experiments")]
struct Args {
    experiment: Experiment,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Replica count; overrides the file.
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the file.
    #[arg(long, value_enum)]
    format: Option<OutFormat>,
}

fn execute(args: Args) -> Result<bool, Error> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(n) = args.replicas {
        config.replicas = n;
    }
    if let Some(f) = args.format {
        config.format = match f {
            OutFormat::Csv => Format::Csv,
            OutFormat::Json => Format::Json,
        };
    }
    let config = config.resolve(args.experiment.into())?;
    let outcome = run(&config, &args.out)?;
    println!("{}", serde_json::to_string_pretty(&outcome).expect("outcome serializes"));
    Ok(outcome.pass != Some(false))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("experiment ran but its checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
