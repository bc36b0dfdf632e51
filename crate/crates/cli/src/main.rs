use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use netsteer::harness::{error_json, replay, resolve_output_dir, run, Command, RunConfig, CONFIG_SCHEMA, MANIFEST_FILE};
use netsteer::Error;

#[derive(Parser)]
#[command(name = "netsteer", version, about = "Steer networked point processes by edge intervention")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides NETSTEER_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a synthetic Hawkes task.
    Simulate(Common),
    /// Fit a jump-ODE model by maximum likelihood.
    Fit(Common),
    /// Receding-horizon edge intervention against a simulated environment.
    Plan(Common),
    /// Meta-train a policy and representation over a task pool.
    MetaTrain(Common),
    /// Adapt a meta-trained policy to held-out tasks.
    Adapt(Common),
    /// Mean-field versus Monte-Carlo cost on a linear jump system.
    MfaEval(Common),
    /// Split a county case file into community count matrices.
    Ingest(Common),
    /// Rerun a manifest and check that every output is byte-identical.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for the rerun; defaults to `replay/` beside the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the configuration JSON schema.
    Schema,
    /// Print the fully resolved configuration.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn execute(cmd: Command, c: &Common) -> Result<(), Error> {
    let mut cfg = load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = resolve_output_dir(c.out.as_deref(), &cfg);
    let m = run(cmd, &cfg, &out)?;
    for o in &m.outputs {
        println!("{}", out.join(&o.file).display());
    }
    println!("{}", out.join(MANIFEST_FILE).display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Cmd::Simulate(c) => execute(Command::Simulate, &c),
        Cmd::Fit(c) => execute(Command::Fit, &c),
        Cmd::Plan(c) => execute(Command::Plan, &c),
        Cmd::MetaTrain(c) => execute(Command::MetaTrain, &c),
        Cmd::Adapt(c) => execute(Command::Adapt, &c),
        Cmd::MfaEval(c) => execute(Command::MfaEval, &c),
        Cmd::Ingest(c) => execute(Command::Ingest, &c),
        Cmd::Replay { manifest, out } => {
            let out = out.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("replay"));
            let report = replay(&manifest, &out)?;
            if report.is_identical() {
                println!("identical: {} files", report.checked);
                Ok(())
            } else {
                Err(Error::ReplayMismatch(report.mismatches.join(", ")))
            }
        }
        Cmd::Schema => {
            print!("{CONFIG_SCHEMA}");
            Ok(())
        }
        Cmd::Config { config } => {
            print!("{}", load(config.as_deref())?.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
