use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seglab::error::{Error, Result};
use seglab::experiment::{
    load_data, parse_config, prepare, run_experiment, run_grid, training_weights, weights_table,
    write_reports, write_weights_into_config, ExperimentConfig, RunOptions,
};

#[derive(Parser)]
#[command(name = "seglab", version, about = "Class-weighted segmentation experiments with an APP loss term")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, tile or resize, split and cache the dataset.
    Prepare(Common),
    /// Print class weights for every scheme and store them in the config.
    Weights(Common),
    /// Train every grid cell and seed not yet in results.csv.
    Train(Common),
    /// Rebuild summary, tables and plot from results.csv.
    Report(Common),
    /// prepare + weights + train + report.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds, overriding train.seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Accepted for compatibility; CPU kernels here are always reproducible.
    #[arg(long)]
    deterministic: bool,
    /// Grid runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        if self.device != "cpu" {
            return Err(Error::config("--device", format!("`{}` is unavailable, expected cpu", self.device)));
        }
        if self.jobs == 0 {
            return Err(Error::config("--jobs", "must be at least 1"));
        }
        let mut config = parse_config(&self.config)?;
        if let Some(seeds) = &self.seeds {
            config.train.seeds = seeds.clone();
        }
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        config.validate()?;
        if self.deterministic {
            log::info!("deterministic mode: CPU kernels are already reproducible");
        }
        Ok(config)
    }

    fn opts(&self) -> RunOptions {
        RunOptions { jobs: self.jobs }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Prepare(c) => {
            let config = c.load()?;
            let records = prepare(&config)?;
            println!("{} samples prepared", records.len());
            Ok(0)
        }
        Command::Weights(c) => {
            let config = c.load()?;
            let data = load_data(&config)?;
            let pairs = training_weights(&config, &data)?;
            print!("{}", weights_table(&pairs));
            write_weights_into_config(&c.config, &pairs)?;
            Ok(0)
        }
        Command::Train(c) => {
            let config = c.load()?;
            let data = load_data(&config)?;
            let outcome = run_grid(&config, &data, c.opts())?;
            report_outcome(&outcome);
            Ok(outcome.exit_code())
        }
        Command::Report(c) => {
            let config = c.load()?;
            let reports = write_reports(&config.output_dir)?;
            println!("{} configurations summarised in {}", reports.len(), config.output_dir.display());
            Ok(0)
        }
        Command::All(c) => {
            let config = c.load()?;
            let outcome = run_experiment(&config, c.opts())?;
            report_outcome(&outcome);
            Ok(outcome.exit_code())
        }
    }
}

fn report_outcome(o: &seglab::experiment::GridOutcome) {
    println!(
        "{} runs: {} trained, {} already done, {} failed",
        o.runs_total, o.runs_succeeded, o.runs_skipped, o.runs_failed
    );
    for f in &o.failures {
        eprintln!("failed: {f}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
