//! Command-line entry points for the forecast-training laboratory.
//!
//! `run` is the whole CLI as a function so integration tests can drive the
//! pipeline in-process; the binary is a thin wrapper around it.

pub mod commands;
pub mod config;
pub mod manifest;

use commands::{CliError, Ctx};
use config::ExperimentConfig;
use std::path::PathBuf;

const USAGE: &str = "\
usage: wc4dvar-lab <command> --config PATH [--stage N] [--loss KIND] [--out DIR] [checkpoints...]

commands:
  gen-truth        integrate the truth trajectory (spin-up discarded)
  gen-reanalysis   add correlated noise with a known covariance
  train-ae         train the state autoencoder on reanalysis
  check-ae         verify reconstruction, diagonality and linearity
                   (--linear-test swaps in an exactly linear reference)
  train-forecast   two-stage forecast training (--stage 1|2, --loss KIND)
  evaluate         score checkpoints on held-out data (CSV + spectra)
  diagnose         run the analytic diagnostic formula suite
  spinup           forecast from a spectrally truncated initial state

environment: WC4DVAR_LOG=quiet silences progress messages.";

struct Args {
    command: String,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    stage: Option<u8>,
    loss: Option<String>,
    linear_test: bool,
    positional: Vec<PathBuf>,
}

fn parse_args(argv: &[String]) -> Result<Args, CliError> {
    if argv.is_empty() {
        return Err(CliError::usage(USAGE));
    }
    let mut args = Args {
        command: argv[0].clone(),
        config: None,
        out: None,
        stage: None,
        loss: None,
        linear_test: false,
        positional: Vec::new(),
    };
    let mut it = argv[1..].iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::usage("--config requires a path"))?;
                args.config = Some(PathBuf::from(v));
            }
            "--out" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::usage("--out requires a directory"))?;
                args.out = Some(PathBuf::from(v));
            }
            "--stage" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::usage("--stage requires 1 or 2"))?;
                args.stage = Some(
                    v.parse()
                        .map_err(|_| CliError::usage("--stage requires 1 or 2"))?,
                );
            }
            "--loss" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::usage("--loss requires a kind"))?;
                args.loss = Some(v.clone());
            }
            "--linear-test" => args.linear_test = true,
            other if other.starts_with("--") => {
                return Err(CliError::usage(format!("unknown flag {other}\n\n{USAGE}")));
            }
            other => args.positional.push(PathBuf::from(other)),
        }
    }
    Ok(args)
}

/// Runs one command; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    match run_inner(argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("wc4dvar-lab: error: {}", e.message);
            e.code
        }
    }
}

fn run_inner(argv: &[String]) -> Result<(), CliError> {
    let args = parse_args(argv)?;
    if args.command == "help" || args.command == "--help" {
        println!("{USAGE}");
        return Ok(());
    }
    let config_path = args
        .config
        .as_ref()
        .ok_or_else(|| CliError::usage(format!("--config is required\n\n{USAGE}")))?;
    if !config_path.exists() {
        return Err(CliError::usage(format!(
            "config file {} does not exist",
            config_path.display()
        )));
    }
    let cfg = ExperimentConfig::load(config_path).map_err(|e| CliError::usage(e.to_string()))?;
    let ctx = Ctx::new(cfg, args.out.clone())?;

    match args.command.as_str() {
        "gen-truth" => commands::cmd_gen_truth(&ctx),
        "gen-reanalysis" => commands::cmd_gen_reanalysis(&ctx),
        "train-ae" => commands::cmd_train_ae(&ctx),
        "check-ae" => commands::cmd_check_ae(&ctx, args.linear_test),
        "train-forecast" => {
            let stage = args
                .stage
                .ok_or_else(|| CliError::usage("train-forecast requires --stage 1 or 2"))?;
            commands::cmd_train_forecast(&ctx, stage, args.loss.as_deref())
        }
        "evaluate" => commands::cmd_evaluate(&ctx, &args.positional),
        "diagnose" => commands::cmd_diagnose(&ctx),
        "spinup" => commands::cmd_spinup(&ctx, &args.positional),
        other => Err(CliError::usage(format!(
            "unknown command {other:?}\n\n{USAGE}"
        ))),
    }
}
