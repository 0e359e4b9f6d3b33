//! Command-line front-end: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use config::{config_help, RunConfig, Section};
use error::Result;

#[derive(Debug, Parser)]
#[command(name = "smartcampus", version, about = "Campus IoT sensor pipeline: synthesis, gaps, imputation, forecasting, people counting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set forecast.epochs=20`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory for outputs and run.json; created if missing
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate lora.csv, sensors.csv and truth.json for a simulated campus
    Synth(SynthArgs),
    /// Parse and validate raw exports; write cleaned copies and a rejection report
    Ingest(IngestArgs),
    /// Detect missing slots per device and write gaps.csv
    Gaps(GapsArgs),
    /// Fill the missing slots of one device field and write grid.csv
    Impute(ImputeArgs),
    /// Compare imputation strategies by downstream LSTM forecast RMSE
    #[command(name = "forecast-eval")]
    ForecastEval(ForecastEvalArgs),
    /// Train the occupancy classifier and write its report and checkpoint
    Count(CountArgs),
    /// Render the per-class table for a confusion matrix CSV
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of devices (sim.n_devices)
    #[arg(long)]
    pub devices: Option<usize>,
    /// Length of the simulated span in days, from sim.start
    #[arg(long)]
    pub days: Option<u32>,
    /// Uplink loss probability (sim.drop_prob)
    #[arg(long)]
    pub drop_prob: Option<f64>,
    /// CO2 noise in ppm (sim.noise_sd)
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Devices with an occupancy signal (sim.occupancy_rooms)
    #[arg(long)]
    pub occupancy_rooms: Option<usize>,
    /// Global seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: Common,
    /// LoRa metadata CSV
    #[arg(long, value_name = "FILE")]
    pub lora: Option<PathBuf>,
    /// Sensor readings CSV
    #[arg(long, value_name = "FILE")]
    pub sensors: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GapMethod {
    /// Frame-counter jumps in a LoRa CSV
    Fcnt,
    /// Empty grid slots in a sensor CSV
    Cadence,
}

#[derive(Debug, Args)]
pub struct GapsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Input CSV: LoRa metadata for fcnt, sensor readings for cadence
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = GapMethod::Fcnt)]
    pub method: GapMethod,
    /// Field whose absence marks a missing slot (cadence method)
    #[arg(long, default_value = "temperature")]
    pub field: String,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Sensor readings CSV
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// drop | zero | linear | poly:2 | poly:3 | knn:K | knn:auto
    #[arg(long)]
    pub strategy: String,
    /// Device EUI; may be omitted when the file holds one device
    #[arg(long)]
    pub device: Option<String>,
    #[arg(long, default_value = "co2")]
    pub field: String,
    /// Global seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ForecastEvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Sensor readings CSV
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Device EUI; defaults to the first device reporting the field
    #[arg(long)]
    pub device: Option<String>,
    #[arg(long, default_value = "co2")]
    pub field: String,
    /// Use at most this many slots of the longest complete stretch
    #[arg(long)]
    pub max_slots: Option<usize>,
    /// Global seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub common: Common,
    /// Sensor readings CSV
    #[arg(long, value_name = "FILE")]
    pub sensors: PathBuf,
    /// Occupancy labels: truth.json, or CSV `time,deveui,people`
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    /// Keep only the earliest N labelled rows
    #[arg(long)]
    pub max_rows: Option<usize>,
    /// Global seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Confusion matrix CSV as written by `count`
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Gaps(_) => "gaps",
            Command::Impute(_) => "impute",
            Command::ForecastEval(_) => "forecast-eval",
            Command::Count(_) => "count",
            Command::Report(_) => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth(a) => &a.common,
            Command::Ingest(a) => &a.common,
            Command::Gaps(a) => &a.common,
            Command::Impute(a) => &a.common,
            Command::ForecastEval(a) => &a.common,
            Command::Count(a) => &a.common,
            Command::Report(a) => &a.common,
        }
    }
}

/// Config sections each subcommand reads.
pub fn sections_for(command: &str) -> &'static [Section] {
    match command {
        "synth" => &[Section::Seed, Section::Sim],
        "ingest" => &[Section::Ingest],
        "gaps" => &[Section::Grid],
        "impute" => &[Section::Seed, Section::Grid, Section::Knn, Section::Eval],
        "forecast-eval" => &[Section::Seed, Section::Grid, Section::Knn, Section::Eval, Section::Forecast],
        "count" => &[Section::Seed, Section::Counter],
        _ => &[],
    }
}

pub const SUBCOMMANDS: [&str; 7] = ["synth", "ingest", "gaps", "impute", "forecast-eval", "count", "report"];

pub fn command() -> clap::Command {
    SUBCOMMANDS.iter().fold(Cli::command(), |cmd, name| {
        cmd.mut_subcommand(*name, |sub| sub.after_help(config_help(sections_for(name))))
    })
}

fn execute(cli: Cli) -> Result<()> {
    let name = cli.command.name();
    let sections = sections_for(name);
    let common = cli.command.common();
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
    match &cli.command {
        Command::Synth(a) => {
            cfg.seed = a.seed.or(cfg.seed);
            if let Some(n) = a.devices {
                cfg.sim.n_devices = n;
            }
            if let Some(d) = a.days {
                cfg.sim.end = cfg.sim.start.offset(i64::from(d) * smartcampus::model::MILLIS_PER_DAY);
            }
            if let Some(p) = a.drop_prob {
                cfg.sim.drop_prob = p;
            }
            if let Some(s) = a.noise_sd {
                cfg.sim.noise_sd = s;
            }
            if let Some(r) = a.occupancy_rooms {
                cfg.sim.occupancy_rooms = r;
            }
        }
        Command::Impute(ImputeArgs { seed, .. })
        | Command::ForecastEval(ForecastEvalArgs { seed, .. })
        | Command::Count(CountArgs { seed, .. }) => cfg.seed = seed.or(cfg.seed),
        _ => {}
    }
    cfg.apply_global_seed();
    cfg.validate(sections)?;
    let mut run = output::Run::new(name, &common.out, cfg.effective(sections))?;
    match &cli.command {
        Command::Synth(_) => commands::synth(&cfg, &mut run)?,
        Command::Ingest(a) => commands::ingest(a, &cfg, &mut run)?,
        Command::Gaps(a) => commands::gaps(a, &cfg, &mut run)?,
        Command::Impute(a) => commands::impute(a, &cfg, &mut run)?,
        Command::ForecastEval(a) => commands::forecast_eval(a, &cfg, &mut run)?,
        Command::Count(a) => commands::count(a, &cfg, &mut run)?,
        Command::Report(a) => commands::report(a, &mut run)?,
    }
    let manifest = run.finish()?;
    log(&format!("wrote {}", manifest.display()));
    Ok(())
}

pub(crate) fn log(msg: &str) {
    eprintln!("smartcampus: {msg}");
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("smartcampus: error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clap_definition_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn every_subcommand_is_routed() {
        let cmd = command();
        let names: Vec<&str> = cmd.get_subcommands().map(|s| s.get_name()).collect();
        assert_eq!(names, SUBCOMMANDS);
    }
}
