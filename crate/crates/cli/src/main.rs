//! `codealign` command-line driver. Each subcommand is one pipeline stage;
//! outputs land under `--out` and carry the hash of the config they were
//! built from.

mod artifacts;
mod commands;
mod error;
mod logs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use codealign::collab::Mode;
use codealign::config::RunConfig;
use codealign::eval::Suite;
use codealign::{Error, RngSeed};

use crate::commands::Context;
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "codealign", version, about = "Modality-isolated collaborative perception simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dot-path override, e.g. `codespace.D=32`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root; every path is relative to it.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
    /// Use artifacts built from a different config.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for scene and frame parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Print errors as one JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset directory.
    GenData,
    /// Pretrain each modality's detection head.
    Pretrain,
    /// Train code spaces (codebooks, adapters, heads).
    TrainCodespace,
    /// Train translators into foreign code spaces, plus dense baselines.
    TrainTranslator,
    /// Run experiment suites and write frame logs.
    Simulate {
        /// Suite to run; repeatable. All suites when omitted.
        #[arg(long)]
        suite: Vec<String>,
        /// Restrict to these collaboration modes; repeatable.
        #[arg(long)]
        mode: Vec<String>,
    },
    /// Aggregate existing frame logs into report.json, report.csv and curves/.
    Report,
}

fn load_config(c: &Common) -> CliResult<RunConfig> {
    let base = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let mut config = base.with_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        config.seed = RngSeed(s);
    }
    Ok(config)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.common.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
    }
    let config = load_config(&cli.common)?;
    let ctx = Context::new(config, &cli.common.out, cli.common.force)?;
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Pretrain => commands::pretrain(&ctx),
        Command::TrainCodespace => commands::train_codespace(&ctx),
        Command::TrainTranslator => commands::train_translator(&ctx),
        Command::Simulate { suite, mode } => {
            let suites = suite.iter().map(|s| Suite::parse(s)).collect::<Result<Vec<_>, _>>()?;
            let modes = mode.iter().map(|m| Mode::parse(m)).collect::<Result<Vec<_>, _>>()?;
            commands::simulate(&ctx, &suites, &modes)
        }
        Command::Report => commands::report(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let json = cli.common.json_errors;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e, json);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn report_error(e: &CliError, json: bool) {
    if json {
        eprintln!("{}", e.to_json());
    } else {
        eprintln!("error: {e}");
    }
}
