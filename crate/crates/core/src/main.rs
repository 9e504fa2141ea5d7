use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use treatboot::runner::{self, ExperimentPlan, PlaceboPlan};
use treatboot::{BootstrapMethod, Error, Manifest};

#[derive(Parser)]
#[command(name = "treatboot", version, about = "Bootstrap standard errors for propensity-score matched effects")]
struct Cli {
    /// Worker threads (defaults to $TREATBOOT_WORKERS, then all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo scenario grid described by a plan file.
    Simulate {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Run the placebo experiment on control-only data.
    Placebo {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Bootstrap one dataset and print the result as JSON.
    Bootstrap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "treatment")]
        method: BootstrapMethod,
        #[arg(long = "B", default_value_t = 500)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the successful replicate estimates to this CSV.
        #[arg(long)]
        replicates_csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> treatboot::Result<serde_json::Value> {
    let workers = match cli.workers {
        Some(n) => Some(n),
        None => runner::workers_from_env()?,
    };
    runner::with_workers(workers, move || -> treatboot::Result<serde_json::Value> {
        match cli.command {
            Command::Simulate { plan } => {
                let plan = ExperimentPlan::from_path(&plan)?;
                let rows = runner::run_grid(&plan)?;
                Ok(serde_json::json!({
                    "output_dir": plan.output_dir,
                    "summary": rows,
                }))
            }
            Command::Placebo { plan } => {
                let plan = PlaceboPlan::from_path(&plan)?;
                let report = runner::run_placebo(&plan)?;
                let mut v = serde_json::to_value(&report)?;
                if let Some(o) = v.as_object_mut() {
                    o.remove("runs");
                    o.insert("trap_rate".into(), report.trap_rate().into());
                }
                Ok(v)
            }
            Command::Bootstrap {
                data,
                manifest,
                method,
                replicates,
                seed,
                replicates_csv,
            } => {
                let manifest = Manifest::from_path(&manifest)?;
                let result = runner::run_single(&data, &manifest, method, replicates, seed)?;
                if let Some(path) = replicates_csv {
                    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                    result.write_replicates_csv(std::io::BufWriter::new(f))?;
                }
                Ok(serde_json::to_value(&result)?)
            }
        }
    })?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
