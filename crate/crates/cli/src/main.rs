use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use spoofsim::config::{key_reference, ScenarioConfig};
use spoofsim::export;
use spoofsim::harness;
use spoofsim::Error;

const SEED_ENV: &str = "SPOOFSIM_SEED";

/// GPS time-shift attack synthesis and synchrophasor bad-data detection.
#[derive(Debug, Parser)]
#[command(name = "spoofsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the unattacked measurement stream and write stream.csv.
    Simulate(Common),
    /// Plan the attack and write the attacked stream and its schedule.
    Attack(Common),
    /// Run every detector over a stream CSV.
    Detect {
        /// Stream CSV with t_seconds, theta_1..N, z_1..M and provenance columns.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full limit-crossing scenario and write all result files.
    Reproduce(Common),
    /// Measure how far the Hankel forecaster stays below its error threshold.
    ForecastStudy(Common),
    /// Run the random time-shift scenario and write all result files.
    RandomCase(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `dotted.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set attack.start_time=2.0
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// RNG seed; falls back to $SPOOFSIM_SEED, then scenario.seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate(c)
            | Command::Attack(c)
            | Command::Reproduce(c)
            | Command::ForecastStudy(c)
            | Command::RandomCase(c) => c,
            Command::Detect { common, .. } => common,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(c: &Common) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => ScenarioConfig::from_file(p).map_err(|e| match e {
            // bad content is a usage problem; an unreadable file is not
            e @ (Error::Config(_) | Error::Format { .. }) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        })?,
        None => ScenarioConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
    }
    for o in &c.overrides {
        cfg.apply_assignment(o).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn ensure_out(out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(Error::Io { path: out.to_path_buf(), source: e }))
}

fn run(cmd: &Command) -> Result<(), Failure> {
    let common = cmd.common();
    let cfg = load_config(common)?;
    let out = &common.out;
    match cmd {
        Command::Simulate(_) => {
            let sim = harness::simulate(&cfg)?;
            ensure_out(out)?;
            let p = out.join("stream.csv");
            export::write_stream(&sim.clean, &p)?;
            report(&[p]);
        }
        Command::Attack(_) => {
            let res = harness::run_limit_crossing_scenario(&cfg)?;
            ensure_out(out)?;
            let stream = out.join("stream.csv");
            export::write_stream(&res.reported, &stream)?;
            let sched = out.join("schedule.csv");
            std::fs::write(&sched, export::schedule_csv(res.schedule.as_ref(), &cfg.support))
                .map_err(|e| Error::Io { path: sched.clone(), source: e })?;
            report(&[stream, sched]);
        }
        Command::Detect { input, .. } => {
            let grid = harness::build_grid(&cfg)?;
            let stream = export::read_stream(input, grid.n_buses(), grid.n_branches())?;
            let rep = harness::run_detectors(&stream, &grid, &cfg)?;
            report(&export::export_detection(&rep, out)?);
        }
        Command::Reproduce(_) => {
            let res = harness::run_limit_crossing_scenario(&cfg)?;
            report(&export::export_results(&res, out, &cfg.support)?);
            print!("{}", export::summary_text(&res));
        }
        Command::ForecastStudy(_) => {
            let rows = harness::run_forecast_study(&cfg, &cfg.forecast_trusted_lens)?;
            report(&export::write_forecast_study(&rows, out)?);
            print!("{}", export::forecast_study_summary(&rows));
        }
        Command::RandomCase(_) => {
            let res = harness::run_random_shift_case(&cfg)?;
            report(&export::export_results(&res, out, &cfg.random_buses)?);
            print!("{}", export::summary_text(&res));
        }
    }
    Ok(())
}

fn command() -> clap::Command {
    let keys = format!("Config keys (defaults shown):\n{}", key_reference());
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for n in names {
        let keys = keys.clone();
        cmd = cmd.mut_subcommand(n, move |s| s.after_help(keys));
    }
    cmd.after_help(keys)
}

fn main() -> ExitCode {
    let matches = command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
