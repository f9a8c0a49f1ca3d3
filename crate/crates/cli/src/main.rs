//! `necklab`: command-line front end to the neck analysis library.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RawConfig;
use report::{Meta, Report};

#[derive(Parser, Debug)]
#[command(author, version, about = "Conformal cylinders, residues and three-circle decay along necks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for report.json and the CSV tables.
    #[arg(long, global = true, default_value = "necklab-out")]
    out: PathBuf,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// `n_t,n_theta`
    #[arg(long, global = true)]
    grid: Option<String>,

    /// `t_min,t_max`
    #[arg(long, global = true, allow_hyphen_values = true)]
    trange: Option<String>,

    /// Comma-separated three-circle rates.
    #[arg(long, global = true)]
    q: Option<String>,

    /// Segment length.
    #[arg(long = "L", global = true)]
    l: Option<f64>,

    /// Segment count.
    #[arg(long, global = true)]
    segments: Option<usize>,

    #[arg(long, global = true)]
    tol_defect: Option<f64>,

    #[arg(long, global = true)]
    tol_residue: Option<f64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Geometry summary and invariant checks.
    Analyze,
    /// Residue sweep over circle stations.
    Residues,
    /// Segment energies, three-circle verdicts and the ladder bound.
    ThreeCircle,
    /// Two-sided exponential fit of segment energies.
    DecayFit,
    /// Harmonic expansion thresholds and random trials.
    HarmonicLab,
    /// Gradient check and Willmore descent.
    Synthesize,
    /// List the configuration keys.
    Keys,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Residues => "residues",
            Command::ThreeCircle => "three-circle",
            Command::DecayFit => "decay-fit",
            Command::HarmonicLab => "harmonic-lab",
            Command::Synthesize => "synthesize",
            Command::Keys => "keys",
        }
    }
}

const INPUT_ERROR: u8 = 2;
const CHECK_FAILED: u8 = 1;

fn raw_config(cli: &Cli) -> Result<RawConfig, config::ConfigError> {
    let mut raw = match &cli.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    let mut set = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            raw.set(key, v);
        }
    };
    set("seed", cli.seed.map(|s| s.to_string()));
    set("grid", cli.grid.clone());
    set("trange", cli.trange.clone());
    set("q", cli.q.clone());
    set("L", cli.l.map(|x| x.to_string()));
    set("segments", cli.segments.map(|k| k.to_string()));
    set("tol_defect", cli.tol_defect.map(|x| x.to_string()));
    set("tol_residue", cli.tol_residue.map(|x| x.to_string()));
    Ok(raw)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Keys = cli.command {
        for (k, doc) in config::KEYS {
            println!("{k:<20} {doc}");
        }
        return ExitCode::SUCCESS;
    }
    let cfg = match raw_config(&cli).and_then(RawConfig::resolve) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("necklab: {e}");
            return ExitCode::from(INPUT_ERROR);
        }
    };
    let outcome = match cli.command {
        Command::Analyze => commands::analyze(&cfg),
        Command::Residues => commands::residues(&cfg),
        Command::ThreeCircle => commands::three_circle(&cfg),
        Command::DecayFit => commands::decay_fit_cmd(&cfg),
        Command::HarmonicLab => commands::harmonic_lab(&cfg),
        Command::Synthesize => commands::synthesize(&cfg),
        Command::Keys => unreachable!(),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            eprintln!("necklab {}: {e}", cli.command.name());
            return ExitCode::from(INPUT_ERROR);
        }
    };
    let report = Report {
        meta: Meta {
            tool: "necklab",
            version: env!("CARGO_PKG_VERSION"),
            command: cli.command.name().to_string(),
            seed: cfg.seed,
            parallel: necklab::par::is_parallel(),
        },
        inputs: cfg.entries.clone(),
        results: outcome.results.clone(),
        checks: outcome.checks.clone(),
    };
    let written = report::write_all(&cli.out, &report, &outcome.tables)
        .map_err(|e| e.to_string())
        .and_then(|_| outcome.save_immersion(&cli.out).map_err(|e| e.to_string()));
    if let Err(e) = written {
        eprintln!("necklab: cannot write to {}: {e}", cli.out.display());
        return ExitCode::from(INPUT_ERROR);
    }
    for c in report.checks.iter().filter(|c| !c.pass) {
        eprintln!(
            "check failed: {} = {:e} ({}, tolerance {:e})",
            c.name, c.value, c.expect, c.tolerance
        );
    }
    if report.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(CHECK_FAILED)
    }
}
