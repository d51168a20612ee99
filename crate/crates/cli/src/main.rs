//! `riskforge` — operator entry point for the scenario synthesis pipeline.
//!
//! One subcommand per pipeline stage (ingest, train, generate, attack,
//! classify, evaluate, report, distribute). Success prints a summary JSON
//! object on stdout and exits 0; failures print a message on stderr and exit
//! 2 (configuration), 3 (data), or 4 (numerical breakdown).

mod args;
mod commands;
mod config;
mod error;

use args::{Cli, Command};
use clap::Parser;
use config::RunConfig;
use error::CliError;

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
        }
        Err(e) => {
            eprintln!("riskforge: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.override_with(cli.seed, cli.out, cli.threads, cli.llm, cli.strict_longtail);
    cli.command.apply(&mut cfg);

    if let Some(n) = cfg.threads {
        if n > 1 {
            eprintln!("riskforge: {n} threads requested; this build runs single-threaded");
        }
    }

    match &cli.command {
        Command::Ingest { .. } => commands::cmd_ingest(&cfg),
        Command::Train { .. } => commands::cmd_train(&cfg),
        Command::Generate { .. } => commands::cmd_generate(&cfg),
        Command::Attack { .. } => commands::cmd_attack(&cfg),
        Command::Classify { .. } => commands::cmd_classify(&cfg),
        Command::Evaluate { .. } => commands::cmd_evaluate(&cfg),
        Command::Report { .. } => commands::cmd_report(&cfg),
        Command::Distribute { .. } => commands::cmd_distribute(&cfg),
    }
}
