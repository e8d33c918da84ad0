use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use drop_daq::config::{ExperimentConfig, Phase};
use drop_daq::phases::run_phase;
use drop_daq::report::{plot_report, PhaseReport};
use drop_daq::transport::TransportMode;

/// Packet-loss and throughput measurements for DROP streams.
#[derive(Parser)]
#[command(name = "dropbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Received rate for 1..N streams.
    MaxRate(RunArgs),
    /// Expected vs. measured rate as the inter-packet pause shrinks.
    LosslessRate(RunArgs),
    /// Highest lossless rate per packet size.
    SizeSweep(RunArgs),
    /// Search thread placements for a lossless setting.
    AssignSearch(RunArgs),
    /// Long lossless run with payload verification.
    Soak(RunArgs),
    /// Check the sequence audit against seeded fault injection.
    FaultOracle(RunArgs),
    /// Render a report column pair as an SVG plot.
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Total packets over all streams.
    #[arg(long)]
    packets: Option<u64>,
    #[arg(long, value_enum)]
    transport: Option<TransportMode>,
    /// Interface for the raw transport.
    #[arg(long)]
    iface: Option<String>,
}

#[derive(Args)]
struct PlotArgs {
    /// report.json written by a phase.
    #[arg(long)]
    input: PathBuf,
    /// Column for the x axis (a parameter, a fixed column, or a metric).
    #[arg(long)]
    x: String,
    #[arg(long, default_value = "packet_rate_pps")]
    y: String,
    /// Column whose values split the rows into series.
    #[arg(long)]
    split_by: Option<String>,
    /// SVG file to write; defaults to the input with an .svg extension.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self, phase: Phase) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.phase.get_or_insert(phase);
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.duration.is_some() || self.packets.is_some() {
            cfg.stop.duration_s = self.duration;
            cfg.stop.packets = self.packets;
        }
        if phase == Phase::FaultOracle {
            if let Some(p) = self.packets {
                cfg.fault_oracle.packets = p;
            }
        }
        if let Some(t) = self.transport {
            cfg.transport = t;
        }
        if self.iface.is_some() {
            cfg.iface = self.iface.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool> {
    let (phase, args) = match cli.command {
        Command::MaxRate(a) => (Phase::MaxRate, a),
        Command::LosslessRate(a) => (Phase::LosslessRate, a),
        Command::SizeSweep(a) => (Phase::SizeSweep, a),
        Command::AssignSearch(a) => (Phase::AssignSearch, a),
        Command::Soak(a) => (Phase::Soak, a),
        Command::FaultOracle(a) => (Phase::FaultOracle, a),
        Command::Plot(p) => {
            let report = PhaseReport::load(&p.input).with_context(|| format!("reading {}", p.input.display()))?;
            let svg = plot_report(&report, &p.x, &p.y, p.split_by.as_deref());
            let out = p.out.unwrap_or_else(|| p.input.with_extension("svg"));
            std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
            return Ok(true);
        }
    };
    let cfg = args.config(phase)?;
    let report = run_phase(phase, &cfg)?;
    print!("{}", report.table());
    println!("results in {}", cfg.out.display());
    Ok(report.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
