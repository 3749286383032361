//! `delayfolio` command-line entry point.
//!
//! Every invocation writes `manifest.json` into the output directory, also on
//! failure. Exit codes: 0 success, 1 verification failure, 2 configuration
//! error, 3 numerical failure.

mod commands;
mod config;
mod failure;
mod output;

use std::fs;
use std::path::PathBuf;

use clap::Parser;

use crate::commands::Command;
use crate::config::{Overrides, RunConfig, SEED_ENV};
use crate::failure::Failure;
use crate::output::{sha256_hex, write_manifest, Manifest, ManifestError, ManifestOverrides, Sink, Versions};

#[derive(Parser, Debug)]
#[command(name = "delayfolio", version, about = "Portfolio optimization under delayed factor models")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration; optional for `figure1`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed and the DELAYFOLIO_SEED fallback.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Size of the worker pool; outputs do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

fn load(cli: &Cli, manifest: &mut Manifest) -> Result<RunConfig, Failure> {
    let cfg = match &cli.config {
        Some(path) => {
            let bytes =
                fs::read(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            manifest.config_sha256 = Some(sha256_hex(&bytes));
            let text = String::from_utf8(bytes).map_err(|_| Failure::Config("config is not valid UTF-8".into()))?;
            config::parse(&text)?
        }
        None if cli.command == Command::Figure1 => RunConfig::default(),
        None => return Err(Failure::Config("--config is required for this command".into())),
    };
    Ok(cfg)
}

fn execute(cli: &Cli, manifest: &mut Manifest) -> Result<(), Failure> {
    let mut cfg = load(cli, manifest)?;
    cfg.apply(&Overrides {
        paths: cli.paths,
        steps: cli.steps,
    });
    cfg.validate()?;
    let env = std::env::var(SEED_ENV).ok();
    let (seed, source) = config::resolve_seed(&cfg, cli.seed, env.as_deref())?;
    manifest.seed = Some(seed);
    manifest.seed_source = Some(source);
    if cli.workers == Some(0) {
        return Err(Failure::Config("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Config(format!("cannot build worker pool: {e}")))?;
    let mut sink = Sink::new(&cli.out)?;
    let result = pool.install(|| commands::run(cli.command, &cfg, seed, &mut sink));
    manifest.outputs = sink.files;
    manifest.timings_ms = sink.timings_ms;
    result
}

fn main() {
    let cli = Cli::parse();
    let mut manifest = Manifest {
        command: cli.command.name().to_string(),
        config_path: cli.config.as_ref().map(|p| p.display().to_string()),
        config_sha256: None,
        seed: None,
        seed_source: None,
        overrides: ManifestOverrides {
            seed: cli.seed,
            paths: cli.paths,
            steps: cli.steps,
            workers: cli.workers,
        },
        versions: Versions {
            delayfolio: env!("CARGO_PKG_VERSION"),
            config_schema: 1,
        },
        outputs: Vec::new(),
        timings_ms: Default::default(),
        status: "ok",
        exit_code: 0,
        error: None,
    };
    let code = match execute(&cli, &mut manifest) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error ({}): {f}", f.kind());
            manifest.status = "error";
            manifest.exit_code = f.exit_code();
            manifest.error = Some(ManifestError {
                kind: f.kind(),
                message: f.to_string(),
            });
            f.exit_code()
        }
    };
    if let Err(e) = write_manifest(&cli.out, &manifest) {
        eprintln!("cannot write manifest: {e}");
    }
    std::process::exit(code);
}
