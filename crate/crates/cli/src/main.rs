use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thermsentry_core::config::PipelineConfig;
use thermsentry_core::pipeline::{
    explain_dir, load_trace, run_detect, run_eval, write_explain, write_json, write_outputs, write_trace, PipelineError,
    Resources, EVAL,
};
use thermsentry_core::simulator::{
    build_layout_from, default_hotspot, fault_trial, quiet, simulate, InjectionKind, RoomLayout, ScenarioSpec,
};

#[derive(Parser)]
#[command(name = "thermsentry", version, about = "Thermal-attack detection over data-center sensor telemetry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic trace.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Scenario used when the config has no `simulation` section.
        #[arg(long, value_enum, default_value_t = Preset::Hotspot)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the detection pipeline over a trace.
    Detect {
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV file, JSON Lines file, or a directory holding readings.jsonl.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a detect output directory against its labels.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise each anomaly region of a detect output directory.
    Explain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Hotspot,
    Quiet,
    Bias,
    Drift,
    Random,
    Malfunction,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, PipelineError> {
    match path {
        Some(p) => PipelineConfig::load(p).map_err(|e| PipelineError::Config(e.to_string())),
        None => Ok(PipelineConfig::default()),
    }
}

fn scenario(cfg: &PipelineConfig, seed: u64, preset: Preset) -> Result<(RoomLayout, ScenarioSpec), PipelineError> {
    if let Some(sim) = &cfg.simulation {
        let layout = build_layout_from(sim.layout.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;
        return Ok((layout, ScenarioSpec { seed, ..sim.scenario.clone() }));
    }
    let fault = |k| {
        let (l, s, _) = fault_trial(k, seed);
        (l, s)
    };
    Ok(match preset {
        Preset::Hotspot => default_hotspot(seed),
        Preset::Quiet => quiet(seed),
        Preset::Bias => fault(InjectionKind::Bias),
        Preset::Drift => fault(InjectionKind::Drift),
        Preset::Random => fault(InjectionKind::Random),
        Preset::Malfunction => fault(InjectionKind::Malfunction),
    })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Simulate { config, seed, preset, out } => {
            let cfg = load_config(config.as_deref())?;
            let (layout, spec) = scenario(&cfg, seed, preset)?;
            let trace = simulate(&layout, &spec).map_err(|e| PipelineError::Config(e.to_string()))?;
            write_trace(&out, &trace)?;
            println!("wrote {} readings to {}", trace.readings.len(), out.display());
        }
        Command::Detect { config, input, out } => {
            let cfg = load_config(config.as_deref())?;
            let res = Resources::load(&cfg)?;
            let trace = load_trace(&input, &cfg)?;
            let result = run_detect(&cfg, &trace, &res)?;
            write_outputs(&out, &result)?;
            println!(
                "{} groups, {} fault windows, {} regions -> {}",
                result.groups.len(),
                result.faults.len(),
                result.regions.len(),
                out.display()
            );
        }
        Command::Eval { config, input, out } => {
            let cfg = load_config(config.as_deref())?;
            let report = run_eval(&input, &cfg)?;
            let out = out.unwrap_or_else(|| input.clone());
            std::fs::create_dir_all(&out)?;
            write_json(&out, EVAL, &report)?;
            print!("{}", report.table());
        }
        Command::Explain { config, input, out } => {
            load_config(config.as_deref())?;
            let records = explain_dir(&input)?;
            write_explain(&out.unwrap_or_else(|| input.clone()), &records)?;
            if records.is_empty() {
                println!("no anomaly regions");
            }
            for r in &records {
                println!("[{} .. {}] peak {:.3}, health {}, groups {}", r.t_start, r.t_end, r.peak, r.label, r.groups.join(", "));
                for a in &r.top_rules {
                    println!("  {:.3}  {}", a.mean_activation, a.rule);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Warn).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
