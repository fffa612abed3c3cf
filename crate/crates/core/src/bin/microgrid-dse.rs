use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use microgrid_dse::config::{Overrides, Scenario, ScenarioConfig};
use microgrid_dse::discretize::DiscretizationMethod;
use microgrid_dse::estimation::run_decentralized;
use microgrid_dse::report::{compute_metrics, format_report, MetricSettings, Metrics};
use microgrid_dse::sim::run_plant;
use microgrid_dse::trace_io::{read_trace, write_estimates, write_trace};
use microgrid_dse::{Error, Result};

const METRICS_FILE: &str = "metrics.json";

/// Microgrid simulation and decentralized dq-frame state estimation.
#[derive(Parser, Debug)]
#[command(name = "microgrid-dse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the plant and write truth.csv and measurements.csv.
    Simulate(ScenarioArgs),
    /// Run the estimators on traces written by `simulate`.
    Estimate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Directory holding truth.csv and measurements.csv (default: output directory).
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Simulate, then estimate.
    Run(ScenarioArgs),
    /// Print a metrics file as a table.
    Report {
        /// metrics.json written by `estimate` or `run`.
        metrics: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Scenario JSON (default: the bundled three-bus scenario).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated time, s.
    #[arg(long)]
    duration: Option<f64>,
    /// Time of the scenario's load event, s.
    #[arg(long)]
    event_time: Option<f64>,
    #[arg(long, value_parser = parse_method)]
    discretization: Option<DiscretizationMethod>,
}

fn parse_method(s: &str) -> std::result::Result<DiscretizationMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::table1(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            duration: self.duration,
            event_time: self.event_time,
            discretization: self.discretization,
            output_directory: self.out.clone(),
        })?;
        cfg.build()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn simulate(scenario: &Scenario) -> Result<()> {
    let trace = run_plant(&scenario.sim)?;
    create_dir(&scenario.output_directory)?;
    write_trace(&trace, &scenario.output_directory)?;
    eprintln!(
        "wrote {} samples to {}",
        trace.len(),
        scenario.output_directory.display()
    );
    Ok(())
}

fn estimate(scenario: &Scenario, traces: &Path) -> Result<()> {
    let sim = &scenario.sim;
    let n_states = 4 * sim.topology.n_buses() + 2 * sim.topology.lines().len();
    let trace = read_trace(traces, n_states, sim.plant_step)?;
    if trace.len() != sim.n_records() {
        return Err(Error::Misaligned(format!(
            "traces hold {} samples but the scenario expects {}",
            trace.len(),
            sim.n_records()
        )));
    }
    let out = run_decentralized(&sim.topology, &scenario.estimator, &trace)?;
    let dir = &scenario.output_directory;
    create_dir(dir)?;
    for (bus, local) in out.locals.iter().enumerate() {
        write_estimates(local, &dir.join(format!("local_bus{}.csv", bus + 1)))?;
    }
    write_estimates(&out.global, &dir.join("global.csv"))?;
    let metrics = compute_metrics(
        &out,
        sim.duration,
        &scenario.event_times,
        Some(sim.seed),
        &MetricSettings::default(),
    )?;
    let path = dir.join(METRICS_FILE);
    std::fs::write(&path, metrics.to_json()).map_err(|source| Error::Io { path, source })?;
    print!("{}", format_report(&metrics));
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(&args.load()?),
        Command::Estimate { scenario, traces } => {
            let s = scenario.load()?;
            let traces = traces.unwrap_or_else(|| s.output_directory.clone());
            estimate(&s, &traces)
        }
        Command::Run(args) => {
            let s = args.load()?;
            simulate(&s)?;
            estimate(&s, &s.output_directory)
        }
        Command::Report { metrics } => {
            print!("{}", format_report(&Metrics::load(&metrics)?));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
