use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eqfree::control::ControlMethod;
use eqfree::pipeline::{self, Controller, PipelineConfig, RunId, Stage, StageError, Summary};
use eqfree::reduction::{DMode, PlantKind};
use eqfree::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_IO: u8 = 3;

/// Equation-free stabilization of the Bratu problem around a learned timestepper.
#[derive(Parser, Debug)]
#[command(name = "eqfree", version)]
struct Cli {
    /// Pipeline configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate snapshot pairs from the FD plant.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the surrogate on the generated pairs.
    Train,
    /// Newton-Krylov fixed point of one plant.
    SteadyState {
        #[arg(long, default_value = "fd")]
        plant: PlantKind,
    },
    /// Leading Ritz values of the Jacobian at the fixed point.
    Spectrum {
        #[arg(long, default_value = "fd")]
        plant: PlantKind,
    },
    /// Slow basis and reduced model (F, D).
    Reduce {
        #[arg(long, default_value = "fd")]
        plant: PlantKind,
        #[arg(long)]
        m_slow: Option<usize>,
        #[arg(long)]
        d_mode: Option<DMode>,
    },
    /// Feedback gain on a reduced model.
    Design {
        #[arg(long, default_value = "fd")]
        plant: PlantKind,
        #[arg(long, default_value = "dlqr")]
        method: ControlMethod,
        /// Comma-separated targets, e.g. `0.3,0.4+0.2i,0.4-0.2i`.
        #[arg(long)]
        poles: Option<String>,
    },
    /// Closed- or open-loop rollout.
    Simulate {
        #[arg(long, default_value = "fd")]
        plant: PlantKind,
        /// dlqr, pp or open.
        #[arg(long, default_value = "dlqr")]
        method: Controller,
        /// Use the reduced model and gain designed on this plant.
        #[arg(long)]
        gain_from: Option<PlantKind>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// Every stage in order.
    Pipeline,
    /// Summary table from the artifacts present.
    Report,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    match &cli.command {
        Command::GenData { seed: Some(seed) } => cfg.datagen.seed = *seed,
        Command::Reduce { m_slow, d_mode, .. } => {
            if let Some(m) = m_slow {
                cfg.reduction.m_slow = *m;
            }
            if let Some(d) = d_mode {
                cfg.reduction.d_mode = *d;
            }
        }
        Command::Simulate { steps, allow_mismatch, .. } => {
            if let Some(s) = steps {
                cfg.sim.steps = *s;
            }
            cfg.sim.allow_mismatch |= *allow_mismatch;
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_of(command: &Command) -> Stage {
    match command {
        Command::GenData { .. } => Stage::GenData,
        Command::Train => Stage::Train,
        Command::SteadyState { .. } => Stage::SteadyState,
        Command::Spectrum { .. } => Stage::Spectrum,
        Command::Reduce { .. } => Stage::Reduce,
        Command::Design { .. } => Stage::Design,
        Command::Simulate { .. } => Stage::Simulate,
        Command::Pipeline | Command::Report => Stage::Report,
    }
}

fn run(cli: &Cli, cfg: &PipelineConfig) -> Result<Vec<Summary>, StageError> {
    let stage = stage_of(&cli.command);
    let wrap = |r: Result<Summary, Error>| r.map(|s| vec![s]).map_err(|error| StageError { stage, error });
    let art = cfg.artifacts();
    if !matches!(cli.command, Command::Pipeline) {
        std::fs::create_dir_all(&art.dir)
            .map_err(|source| Error::Io { path: art.dir.display().to_string(), source })
            .and_then(|_| cfg.to_toml())
            .and_then(|text| eqfree::io::write_atomic(&art.resolved_config(), text.as_bytes()))
            .map_err(|error| StageError { stage, error })?;
    }
    match &cli.command {
        Command::GenData { .. } => wrap(pipeline::gen_data(cfg)),
        Command::Train => wrap(pipeline::train(cfg)),
        Command::SteadyState { plant } => wrap(pipeline::steady_state(cfg, *plant)),
        Command::Spectrum { plant } => wrap(pipeline::spectrum(cfg, *plant)),
        Command::Reduce { plant, .. } => wrap(pipeline::reduce(cfg, *plant)),
        Command::Design { plant, method, poles } => {
            let poles = poles.as_deref().map(pipeline::parse_poles).transpose().map_err(|error| StageError { stage, error })?;
            wrap(pipeline::design(cfg, *plant, *method, poles.as_deref()))
        }
        Command::Simulate { plant, method, gain_from, .. } => {
            let run = RunId { plant: *plant, controller: *method, design_plant: gain_from.unwrap_or(*plant) };
            wrap(pipeline::simulate(cfg, &run))
        }
        Command::Pipeline => pipeline::run_pipeline(cfg),
        Command::Report => wrap(pipeline::report(cfg)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if matches!(e, Error::Io { .. }) { EXIT_IO } else { EXIT_USAGE });
        }
    };
    match run(&cli, &cfg) {
        Ok(summaries) => {
            for s in summaries {
                println!("{s}");
            }
            ExitCode::SUCCESS
        }
        Err(StageError { stage, error }) => {
            eprintln!("error: stage={stage} {error}");
            let code = if error.is_io() {
                EXIT_IO
            } else if matches!(error, Error::InvalidArgument(_) | Error::Config(_)) {
                EXIT_USAGE
            } else {
                EXIT_NUMERIC
            };
            ExitCode::from(code)
        }
    }
}
