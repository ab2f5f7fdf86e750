use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mldili::config::RunConfig;
use mldili::multilevel::Mode;
use mldili::pipeline::{self, Layout, RunOverrides};
use mldili::{Error, Result};

/// Multilevel likelihood-informed MCMC for the elliptic inverse problem.
#[derive(Parser, Debug)]
#[command(name = "mldili", version)]
struct Cli {
    /// JSON configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a truth field and synthesise noisy observations.
    GenerateData {
        /// Overwrite existing data files.
        #[arg(long)]
        force: bool,
    },
    /// Build the hierarchical likelihood-informed subspace.
    BuildLis,
    /// Run a sampler and write its report and traces.
    Run {
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarise run reports as a cost-against-tolerance CSV.
    Report {
        /// Report files or directories; the configured runs directory by default.
        paths: Vec<PathBuf>,
        /// Destination CSV; printed to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>, workers: Option<usize>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if workers.is_some() {
        cfg.run.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_ref(), cli.workers)?;
    match cli.command {
        Command::GenerateData { force } => {
            let data = pipeline::generate_data(&cfg, force)?;
            println!(
                "wrote {} ({} observations, sigma {:.4e})",
                Layout::new(&cfg.output_dir).data().display(),
                data.y.len(),
                data.sigma
            );
        }
        Command::BuildLis => {
            let (_, summary) = pipeline::build_lis(&cfg)?;
            print!("{}", summary.table());
            println!(
                "Hessian products: {:.2} s with factor reuse, {:.2} s without",
                summary.hessian_seconds_reuse, summary.hessian_seconds_fresh
            );
        }
        Command::Run { mode, eps, seed } => {
            let cfg = RunOverrides {
                mode,
                eps,
                seed,
                workers: None,
            }
            .apply(&cfg)?;
            let out = pipeline::run(&cfg)?;
            let r = &out.run.report;
            println!("mode {} estimate {:.8e} std error {:.3e}", r.mode, r.estimate, r.std_error());
            println!("samples per level {:?}", r.allocation);
            println!("written to {}", out.dir.display());
        }
        Command::Report { paths, out } => {
            let layout = Layout::new(&cfg.output_dir);
            let inputs = if paths.is_empty() { vec![layout.runs()] } else { paths };
            let csv = pipeline::summarize_runs(&inputs, Some(&layout.lis_summary()))?;
            print!("{csv}");
            let dest = out.unwrap_or_else(|| layout.root.join("cost_vs_tolerance.csv"));
            std::fs::write(&dest, &csv).map_err(|e| Error::io(&dest, e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if e.is_config() {
                ExitCode::from(2)
            } else if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
