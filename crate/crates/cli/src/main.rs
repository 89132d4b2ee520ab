//! Batch front-end: one subcommand per pipeline stage, all parameters in a
//! TOML configuration file.

mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use commands::Outputs;
use config::ExperimentConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "polydiff", version, about = "Variational diffusing orbits for a pendulum-rotor system")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(short, long, global = true, default_value = "polydiff.toml")]
    config: PathBuf,
    /// Overrides `output_dir` from the configuration.
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
    /// Suppress the summary line.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Melnikov fields and condition-1 certificates.
    Melnikov,
    /// A single minimizing loop.
    Loop,
    /// One transition between neighbouring frequencies.
    Transition,
    /// A chained diffusing orbit.
    Diffuse,
    /// Drift time against μ and the fitted exponent.
    Scaling,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Melnikov => "melnikov",
            Command::Loop => "loop",
            Command::Transition => "transition",
            Command::Diffuse => "diffuse",
            Command::Scaling => "scaling",
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let (mut cfg, text) = ExperimentConfig::load(&cli.config)?;
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if cfg.threads > 0 {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let mut out = Outputs::new(&cfg.output_dir)?;
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let result = match cli.command {
        Command::Melnikov => commands::cmd_melnikov(&cfg, &mut out),
        Command::Loop => commands::cmd_loop(&cfg, &mut out),
        Command::Transition => commands::cmd_transition(&cfg, &mut out),
        Command::Diffuse => commands::cmd_diffuse(&cfg, &mut out),
        Command::Scaling => commands::cmd_scaling(&cfg, &mut out),
    };
    let (status, code) = match &result {
        Ok(()) => ("ok".to_string(), 0),
        Err(e) => (e.to_string(), e.exit_code()),
    };
    let files = out.files.clone();
    let manifest = json!({
        "command": cli.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": format!("{:x}", Sha256::digest(text.as_bytes())),
        "config": cfg,
        "started_unix": started_unix,
        "wall_time_s": started.elapsed().as_secs_f64(),
        "outputs": files,
        "status": status,
        "exit_code": code,
    });
    out.json("manifest.json", &manifest)?;
    if result.is_ok() && !cli.quiet {
        println!("{}: {}", cli.command.name(), out.summary);
    }
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("polydiff {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
