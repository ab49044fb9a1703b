use std::path::PathBuf;
use std::process::ExitCode;

use boss_core::config::RunConfig;
use boss_core::pipeline::{dispatch, Command};
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Train,
    Search,
    Oracle,
    Correlate,
    Track,
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Search => Command::Search,
            Cmd::Oracle => Command::Oracle,
            Cmd::Correlate => Command::Correlate,
            Cmd::Track => Command::Track,
            Cmd::Report => Command::Report,
        }
    }
}

/// Block-wise self-supervised architecture search.
#[derive(Debug, Parser)]
#[command(name = "boss", version)]
struct Args {
    command: Cmd,
    /// TOML run configuration; every field defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one field by dotted path, e.g. `trainer.epochs=30`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(args: &Args) -> boss_core::Result<Vec<PathBuf>> {
    let config = match &args.config {
        Some(p) => RunConfig::load(p, &args.overrides)?,
        None => RunConfig::parse("", &args.overrides)?,
    };
    dispatch(args.command.into(), &config)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
