//! Command-line front end. Arguments are processed left to right: `--config
//! FILE` loads `key = value` lines at that position, any other `--key value`
//! pair overrides a single key, so overrides after the file win.

mod commands;
mod config;

use std::process::ExitCode;

use metar::{Error, Result};

use crate::config::RunConfig;

const COMMANDS: &str = "  synth     generate a planted-translation benchmark into data_dir
  stats     print dataset statistics for data_dir
  pretrain  train translational embeddings on the background graph
  train     train the meta learner, writing a checkpoint and a loss log
  eval      rank one split with a trained checkpoint
  ablate    compare standard, -g, and -g-r rankings in one table
  help      show this message";

fn usage() -> String {
    let defaults: String = RunConfig::default()
        .canonical()
        .lines()
        .map(|l| format!("  {l}\n"))
        .collect();
    format!(
        "usage: metar <command> [--config FILE] [--key value]...\n\n\
         commands:\n{COMMANDS}\n\n\
         keys and defaults (also accepted as `key = value` lines in a config file):\n{defaults}"
    )
}

fn build_config(args: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg.strip_prefix("--").ok_or_else(|| {
            Error::InvalidConfig(format!("expected `--key value`, got {arg:?}"))
        })?;
        let value = it
            .next()
            .ok_or_else(|| Error::InvalidConfig(format!("missing value for --{key}")))?;
        if key == "config" {
            cfg.load_file(value.as_ref())?;
        } else {
            cfg.set(key, value)?;
        }
    }
    Ok(cfg)
}

fn run() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let command = args.first().map(String::as_str).ok_or_else(|| {
        Error::InvalidConfig("missing command (run `metar help` for usage)".into())
    })?;
    if matches!(command, "help" | "--help" | "-h") {
        print!("{}", usage());
        return Ok(());
    }
    let cfg = build_config(&args[1..])?;
    match command {
        "synth" => commands::cmd_synth(&cfg),
        "stats" => commands::cmd_stats(&cfg),
        "pretrain" => commands::cmd_pretrain(&cfg),
        "train" => commands::cmd_train(&cfg),
        "eval" => commands::cmd_eval(&cfg),
        "ablate" => commands::cmd_ablate(&cfg),
        other => Err(Error::InvalidConfig(format!(
            "unknown command {other:?} (run `metar help` for the command list)"
        ))),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
