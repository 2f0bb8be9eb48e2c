use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use calderon_lab::harness::{self, error_code, ExperimentConfig, RunOutcome};
use calderon_lab::reconstruct::ProviderMode;
use calderon_lab::Result;

#[derive(Parser, Debug)]
#[command(name = "calderon-lab", version, about = "Forward solves, DN maps and boundary reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides output.directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Mesh refinement level override.
    #[arg(long, global = true)]
    level: Option<usize>,
    /// Reconstruction provider.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    VerifyModel,
    Forward,
    DnMap,
    Linearize,
    Reconstruct,
    Convergence,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Mode {
    Direct,
    EndToEnd,
    Measured,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.parallelism.workers = w;
    }
    if let Some(l) = cli.level {
        cfg.domain.refinement_level = l;
    }
    if let Some(m) = cli.mode {
        cfg.reconstruction.mode = match m {
            Mode::Direct => ProviderMode::SyntheticDirect,
            Mode::EndToEnd => ProviderMode::EndToEnd,
            Mode::Measured => ProviderMode::Measured,
        };
    }
    if let Some(o) = &cli.out {
        cfg.output.directory = o.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<RunOutcome> {
    let cfg = load(cli)?;
    let out = PathBuf::from(&cfg.output.directory);
    match cli.command {
        Command::VerifyModel => harness::run_verify_model(&cfg, &out),
        Command::Forward => harness::run_forward(&cfg, &out),
        Command::DnMap => harness::run_dn_map(&cfg, &out),
        Command::Linearize => harness::run_linearize(&cfg, &out),
        Command::Reconstruct => harness::run_reconstruct(&cfg, &out),
        Command::Convergence => harness::run_convergence(&cfg, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            for m in &outcome.messages {
                println!("{m}");
            }
            println!("status: {} ({})", outcome.status.as_str(), outcome.out_dir.display());
            ExitCode::from(outcome.status.code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e) as u8)
        }
    }
}
