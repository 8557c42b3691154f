use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use filterlab::cli_io::{self, Command, ExitStatus};

/// Linear contrastive learning with corrupted pairs: data-filtering
/// experiments.
#[derive(Parser)]
#[command(name = "filterlab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (TOML or JSON). Optional for `verify`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, env = "FILTERLAB_THREADS")]
    threads: Option<usize>,
}

fn abort(err: impl std::fmt::Display) -> ExitCode {
    eprintln!("{}", json!({"status": "aborted", "error": err.to_string()}));
    ExitCode::from(ExitStatus::Aborted.code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            return abort(e);
        }
    }
    let cfg = match cli.config.as_deref().map(cli_io::parse_config).transpose() {
        Ok(c) => c.map(|mut c| {
            if let Some(s) = cli.seed {
                c.master_seed = s;
            }
            c
        }),
        Err(e) => return abort(e),
    };
    match cli_io::dispatch(cli.command, cfg.as_ref(), &cli.out) {
        Ok(outcome) => {
            println!(
                "{}",
                json!({"status": outcome.status, "outputs": outcome.manifest.outputs, "summary": outcome.manifest.summary})
            );
            ExitCode::from(outcome.status.code() as u8)
        }
        Err(e) => abort(e),
    }
}
