use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use amc_kfac::experiment::config::DataSource;
use amc_kfac::experiment::metrics::write_json;
use amc_kfac::experiment::{self, load_datasets, ExperimentConfig, OptimizerKind};
use amc_kfac::Result;

#[derive(Parser)]
#[command(version, about = "KFAC training with inversions on a simulated RRAM analog solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Use the built-in synthetic dataset instead of EMNIST.
    #[arg(long)]
    synthetic: bool,
    /// EMNIST letters image file (IDX, optionally gzipped).
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    /// EMNIST letters label file (IDX, optionally gzipped).
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the network and write metrics.csv, summary.json, features.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        optimizer: Option<OptimizerKind>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve A X = B from text matrix files through the analog pipeline.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        rhs: PathBuf,
        /// Fixed-point precision target of the refinement.
        #[arg(long, default_value_t = 24)]
        bits: u32,
    },
    /// Measure one-shot error and refinement iterations on the KFAC workload.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Grid-search the `[sweep]` section for the fewest epochs to fit.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        optimizer: Option<OptimizerKind>,
        /// Seeds per grid cell; overrides `[sweep] seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn load_config(common: &Common, data: Option<&DataArgs>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = data {
        if d.synthetic {
            cfg.data.source = DataSource::Synthetic;
        }
        if let (Some(i), Some(l)) = (&d.images, &d.labels) {
            cfg.data.source = DataSource::Emnist;
            cfg.data.images = Some(i.clone());
            cfg.data.labels = Some(l.clone());
        }
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            data,
            optimizer,
            seed,
        } => {
            let mut cfg = load_config(&common, Some(&data))?;
            if let Some(o) = optimizer {
                cfg.train.optimizer = o;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let record = experiment::run_training(&cfg, &common.out)?;
            print_json(&experiment::RunSummary::from_record(&record));
        }
        Command::Solve {
            common,
            matrix,
            rhs,
            bits,
        } => {
            let cfg = load_config(&common, None)?;
            print_json(&experiment::run_solve(&matrix, &rhs, bits, &cfg, &common.out)?);
        }
        Command::Calibrate { common, data, trials } => {
            let cfg = load_config(&common, Some(&data))?;
            print_json(&experiment::run_calibrate(&cfg, trials, &common.out)?);
        }
        Command::Sweep {
            common,
            data,
            optimizer,
            seeds,
        } => {
            let mut cfg = load_config(&common, Some(&data))?;
            if let Some(o) = optimizer {
                cfg.train.optimizer = o;
            }
            let seeds = if !seeds.is_empty() {
                seeds
            } else if !cfg.sweep.seeds.is_empty() {
                cfg.sweep.seeds.clone()
            } else {
                vec![cfg.train.seed]
            };
            let datasets = load_datasets(&cfg)?;
            let result = experiment::sweep(&cfg, &datasets, &seeds)?;
            write_sweep(&result, &common.out)?;
            print_json(&result);
        }
    }
    Ok(())
}

fn write_sweep(result: &experiment::SweepResult, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| amc_kfac::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_json(result, &out.join("sweep.json"))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // wrapper messages already embed their sources
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
