use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use mcslam::eval::AlignMode;
use mcslam_cli::{
    cmd_bench, cmd_eval, cmd_overlap, cmd_run, cmd_simulate, format_bench, resolve_rig, CliError, RunConfig,
};

/// Multi-camera visual SLAM: simulate datasets, run the pipeline, evaluate
/// trajectories and benchmark camera configurations.
#[derive(Parser, Debug)]
#[command(name = "mcslam", version)]
struct Cli {
    /// TOML config; every field is optional (see the defaults below).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the simulator and the pipeline; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Trajectory alignment for eval and bench.
    #[arg(long, global = true, default_value = "sim3", value_parser = parse_mode)]
    mode: AlignMode,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the configured synthetic sequence as a dataset directory.
    Simulate,
    /// Run the pipeline on `dataset`, or on the configured simulation.
    Run,
    /// ATE and scale of an estimated TUM trajectory against ground truth.
    Eval { estimate: PathBuf, groundtruth: PathBuf },
    /// Camera-pair overlap summary of a rig.
    Overlap {
        /// Rig JSON; defaults to the config's rig or dataset.
        rig: Option<PathBuf>,
    },
    /// Camera count by rig kind matrix over several seeds.
    Bench,
}

fn parse_mode(s: &str) -> Result<AlignMode, String> {
    s.parse()
}

fn defaults_help() -> String {
    format!(
        "Configuration defaults (TOML; any subset may be given with --config):\n\n{}",
        RunConfig::default().to_toml_string()
    )
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    match cli.command {
        Command::Simulate => {
            let dir = cmd_simulate(&cfg)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Run => {
            let s = cmd_run(&cfg)?;
            println!(
                "{} frames, {} posed, {} keyframes, output in {}",
                s.frames,
                s.posed,
                s.keyframes,
                cfg.out.display()
            );
            for (a, b) in &s.lost {
                println!("tracking lost: frames {a}..={b}");
            }
            if let Some((se3, sim3)) = &s.ate {
                println!(
                    "ATE se3 {:.4} m ({:.3}%), sim3 {:.4} m, scale {:.4}",
                    se3.rmse, se3.percent, sim3.rmse, sim3.scale
                );
            }
        }
        Command::Eval { estimate, groundtruth } => {
            cmd_eval(&estimate, &groundtruth, cli.mode, io::stdout().lock())?;
        }
        Command::Overlap { rig } => {
            let rig = resolve_rig(&cfg, rig.as_deref())?;
            cmd_overlap(&rig, &cfg.pipeline, io::stdout().lock())?;
        }
        Command::Bench => {
            let rows = cmd_bench(&cfg, cli.mode)?;
            print!("{}", format_bench(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let command = Cli::command().after_long_help(defaults_help());
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
