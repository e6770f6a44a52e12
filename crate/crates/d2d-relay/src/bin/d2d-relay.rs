use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use d2d_relay::harness::{
    compare_modes, emit_results, run_experiment, simulate_drop_full, ExperimentSpec, Mode, OutputFormat, RunMetrics,
};

#[derive(Parser)]
#[command(name = "d2d-relay", version, about = "Relay-aided D2D resource allocation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a spec file.
    Run {
        spec: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the same drops under several modes.
    Compare {
        spec: PathBuf,
        /// Comma-separated modes.
        #[arg(long, value_delimiter = ',', default_value = "nominal,chance,robust")]
        modes: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the raw JSON of a single drop.
    DumpDrop {
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        drop: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    step_a: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    mult_init: Option<f64>,
    #[arg(long)]
    lambda_ceiling: Option<f64>,
    /// Override num_drops.
    #[arg(long)]
    drops: Option<usize>,
    /// Override master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value = "csv")]
    format: String,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self, path: &PathBuf) -> Result<ExperimentSpec> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut spec = ExperimentSpec::from_toml(&text)?;
        let s = &mut spec.solver;
        if let Some(v) = self.step_a {
            s.step_a = v;
        }
        if let Some(v) = self.t_max {
            s.t_max = v;
        }
        if let Some(v) = self.epsilon {
            s.epsilon = v;
        }
        if let Some(v) = self.mult_init {
            s.mult_init = v;
        }
        if let Some(v) = self.lambda_ceiling {
            s.lambda_ceiling = v;
        }
        if let Some(v) = self.drops {
            spec.num_drops = v;
        }
        if let Some(v) = self.seed {
            spec.master_seed = v;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn sink(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
            None => Box::new(io::stdout().lock()),
        })
    }

    fn emit(&self, metrics: &[RunMetrics]) -> Result<ExitCode> {
        let format: OutputFormat = self.format.parse()?;
        emit_results(metrics, format, self.sink()?)?;
        let bad: Vec<_> = metrics.iter().filter(|m| m.infeasibility_dominated()).collect();
        for m in &bad {
            eprintln!(
                "warning: {} of {} drops infeasible ({} mode{})",
                m.infeasible_drops,
                m.num_drops,
                m.mode,
                m.sweep_value.map(|v| format!(", sweep value {v}")).unwrap_or_default()
            );
        }
        Ok(if bad.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { spec, common } => {
            let spec = common.load(&spec)?;
            common.emit(&run_experiment(&spec, common.workers)?)
        }
        Command::Compare { spec, modes, common } => {
            let spec = common.load(&spec)?;
            let modes = modes.iter().map(|m| m.parse::<Mode>()).collect::<Result<Vec<_>, _>>()?;
            for &mode in &modes {
                ExperimentSpec { mode, ..spec.clone() }.validate()?;
            }
            common.emit(&compare_modes(&spec, &modes, common.workers)?)
        }
        Command::DumpDrop { spec, drop, common } => {
            let spec = common.load(&spec)?;
            let point = spec.points()?.into_iter().next().context("empty sweep")?;
            let dump = simulate_drop_full(&point, drop)?;
            let mut w = common.sink()?;
            serde_json::to_writer_pretty(&mut w, &dump)?;
            writeln!(w)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
