use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use roamfl::config::RunConfig;
use roamfl::experiment::{self, RunError};

#[derive(Parser)]
#[command(
    name = "roamfl",
    version,
    about = "Split federated learning with edge-to-edge training migration"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Overrides {
    /// fedfly or restart
    #[arg(long)]
    mode: Option<String>,
    /// mem or tcp
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must be missing or empty.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every role of a config in this process.
    Run {
        config: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
    /// Compare the artifacts of two runs.
    Compare { a: PathBuf, b: PathBuf },
    /// Write gnuplot tables from a metrics file.
    PlotExport {
        csv: PathBuf,
        /// Defaults to the directory holding the CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one role over TCP; every listener needs an address in the config.
    Role {
        config: PathBuf,
        /// central, an edge id or a device id
        #[arg(long)]
        id: String,
        #[command(flatten)]
        over: Overrides,
    },
}

fn load(path: &PathBuf, over: &Overrides) -> Result<RunConfig, RunError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(m) = &over.mode {
        cfg.mode = m.clone();
    }
    if let Some(b) = &over.backend {
        cfg.backend = b.clone();
    }
    if let Some(s) = over.seed {
        cfg.seed = s;
    }
    if let Some(o) = &over.out {
        cfg.output = Some(o.clone());
    }
    experiment::strategy(&cfg)?;
    experiment::backend(&cfg)?;
    Ok(cfg)
}

fn run(cmd: Cmd) -> Result<(), RunError> {
    match cmd {
        Cmd::Run { config, over } => {
            let cfg = load(&config, &over)?;
            let out = cfg
                .output
                .clone()
                .ok_or_else(|| RunError::Usage("no output directory; pass --out".into()))?;
            let result = experiment::run_to_dir(&cfg, &out)?;
            let s = &result.summary;
            println!(
                "{} rounds, final accuracy {:.4}, device rounds {}, reduction vs restart {:.3}, max overhead {:.3} s",
                s.rounds, s.final_test_accuracy, s.total_device_rounds, s.reduction_vs_restart, s.migration_overhead_max_s
            );
            println!("results in {}", out.display());
            match result.error {
                Some(e) => Err(RunError::Failed(e)),
                None => Ok(()),
            }
        }
        Cmd::Compare { a, b } => {
            print!("{}", experiment::compare(&a, &b)?);
            Ok(())
        }
        Cmd::PlotExport { csv, out } => {
            let dir = out.unwrap_or_else(|| csv.parent().map(PathBuf::from).unwrap_or_default());
            for p in experiment::plot_export(&csv, &dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Cmd::Role { config, id, over } => {
            let cfg = load(&config, &over)?;
            let out = cfg.output.clone();
            if let Some(result) = experiment::run_single_role(&cfg, &id, out.as_deref())? {
                println!("final accuracy {:.4}", result.summary.final_test_accuracy);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
