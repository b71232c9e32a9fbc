//! `collab`: train, evaluate, sweep message/key sizes, compute BIS tables
//! and move datasets in and out of their binary container.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use collab_core::scenario::Setting;

pub use config::RunConfig;
pub use error::{CliError, CliResult, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "collab", version, about = "Bandwidth-aware collaborative perception experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.iterations=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_parser = parse_setting)]
    pub setting: Option<Setting>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_setting(s: &str) -> Result<Setting, String> {
    s.parse().map_err(|e: collab_core::Error| e.to_string())
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(s) = self.setting {
            overrides.push(format!("setting=\"{s}\""));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        overrides.extend(self.overrides.iter().cloned());
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one method and write checkpoint, history, report and config.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset container to train on instead of generating one.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate checkpoints on the test episodes.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate over a message-size by key-size grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Message sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
        /// Key sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute BIS from a `method,setting,accuracy,kbpf` CSV.
    BisTable {
        #[arg(long)]
        input: PathBuf,
        /// Output CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the configured split and write it as a dataset container.
    Export {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read and validate a dataset container, optionally re-writing it.
    Import {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs `args` (program name first) and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match command {
        Command::Train { config, out: dir, dataset } => {
            let mut cfg = config.resolve()?;
            if let Some(d) = dir {
                cfg.output.dir = d;
            }
            let o = commands::cmd_train(&cfg, dataset.as_deref())?;
            let _ = writeln!(
                out,
                "{}: accuracy {:.4}, selection {}, kbpf {}",
                o.record.method,
                o.record.overall_acc,
                fmt_opt(o.record.selection_acc),
                fmt_opt(o.record.kbpf)
            );
            let _ = writeln!(out, "wrote {}", cfg.output.dir.display());
        }
        Command::Eval {
            config,
            checkpoints,
            dataset,
            out: path,
        } => {
            let cfg = config.resolve()?;
            for r in commands::cmd_eval(&cfg, &checkpoints, dataset.as_deref(), &path)? {
                let _ = writeln!(
                    out,
                    "{}: accuracy {:.4}, selection {}, kbpf {}, BIS {}",
                    r.method,
                    r.overall_acc,
                    fmt_opt(r.selection_acc),
                    fmt_opt(r.kbpf),
                    fmt_opt(r.bis)
                );
            }
        }
        Command::Sweep {
            config,
            m,
            k,
            dataset,
            out: path,
        } => {
            let mut cfg = config.resolve()?;
            if !m.is_empty() {
                cfg.sweep.message_sizes = m;
            }
            if !k.is_empty() {
                cfg.sweep.key_sizes = k;
            }
            cfg.validate()?;
            for r in commands::cmd_sweep(&cfg, dataset.as_deref(), &path)? {
                let _ = writeln!(
                    out,
                    "m={:<3} k={:<5} selection {} accuracy {} {}",
                    r.m,
                    r.k,
                    fmt_opt(r.selection_acc),
                    fmt_opt(r.overall_acc),
                    r.error
                );
            }
        }
        Command::BisTable { input, out: path } => {
            let cells = commands::cmd_bis_table(&input)?;
            match path {
                Some(p) => commands::write_bis_table(&cells, std::fs::File::create(p).map_err(collab_core::Error::from)?)?,
                None => commands::write_bis_table(&cells, &mut out)?,
            }
        }
        Command::Export { config, out: path } => {
            let cfg = config.resolve()?;
            let s = commands::cmd_export(&cfg, &path)?;
            let _ = writeln!(
                out,
                "{}: {} train, {} val, {} test episodes -> {}",
                s.setting,
                s.train.len(),
                s.val.len(),
                s.test.len(),
                path.display()
            );
        }
        Command::Import { input, out: path } => {
            let s = commands::cmd_import(&input, path.as_deref())?;
            let _ = writeln!(
                out,
                "{}: {} train, {} val, {} test episodes",
                s.setting,
                s.train.len(),
                s.val.len(),
                s.test.len()
            );
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}
