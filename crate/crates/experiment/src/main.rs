use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use blendnav::metrics::summary_files;
use blendnav::{load_config, run_to_dir, summarize, sweep};
use blendnav_teleop::{Server, ServerConfig};
use clap::{Parser, Subcommand};
use log::error;

/// Blended-autonomy navigation experiments.
#[derive(Parser)]
#[command(name = "blendnav", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One seeded closed-loop run; writes per-tick and summary CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `output` from the config, else `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every drop × delay cell for seeds 0..repetitions, plus a manifest.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-cell means and standard errors of every summary file in a directory.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Live sessions for operator consoles (see PROTOCOL.md).
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// `println!` that treats a closed stdout (e.g. piped into `head`) as done.
macro_rules! say {
    ($($arg:tt)*) => {{
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, $($arg)*).and_then(|()| out.flush());
    }};
}

fn out_dir(cli: Option<PathBuf>, config: Option<&PathBuf>) -> PathBuf {
    cli.or_else(|| config.cloned()).unwrap_or_else(|| PathBuf::from("out"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BLENDNAV_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load_config(&config)?;
            let out = out_dir(out, cfg.output.as_ref());
            let (metrics, files) = run_to_dir(&cfg, seed, &out)?;
            let s = &metrics.summary;
            say!(
                "ticks {} completed {} path_length {:.3} mean_operator_weight {:.3}{}",
                s.ticks,
                s.completed,
                s.path_length,
                s.mean_operator_weight,
                if s.failed { " FAILED" } else { "" }
            );
            say!("{}", out.join(files.ticks).display());
            say!("{}", out.join(files.summary).display());
        }
        Command::Sweep { config, out } => {
            let cfg = load_config(&config)?;
            let out = out_dir(out, cfg.output.as_ref());
            let manifest = sweep(&cfg, &out)?;
            say!("{} cells × {} seeds", manifest.cells.len(), manifest.seeds.len());
            say!("{}", out.join("manifest.json").display());
        }
        Command::Summarize { input, out } => {
            let files = summary_files(&input)?;
            if files.is_empty() {
                return Err(format!("no *.summary.csv files in {}", input.display()).into());
            }
            let cells = summarize(&files, &out)?;
            say!("{} cells from {} files -> {}", cells.len(), files.len(), out.display());
        }
        Command::Serve { config, port, host, seed } => {
            let cfg = load_config(&config)?;
            let server = Server::bind((host.as_str(), port), ServerConfig::realtime(cfg.sim_config(), seed))?;
            say!("listening on {}", server.local_addr()?);
            server.run()?;
        }
    }
    Ok(())
}
