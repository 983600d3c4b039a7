mod args;
mod bench;
mod compress;
mod error;
mod plan;
mod settings;
mod verify;

use std::process::ExitCode;

use clap::Parser;
use flashsvd_core::ExecMode;

use crate::args::{Cli, Command};
use crate::error::CliResult;
use crate::settings::Settings;

fn dispatch(cli: Cli) -> CliResult<()> {
    let default_modes: &[ExecMode] = match cli.command {
        Command::Bench { .. } => &ExecMode::ALL,
        _ => &[ExecMode::FlashV1],
    };
    let mut s = Settings::resolve(cli.common, default_modes)?;
    match cli.command {
        Command::Compress { input } => compress::run(&s, input.as_deref()),
        Command::Verify {
            suites,
            cases,
            inject_off_by_one,
        } => verify::run(&s, &suites, cases, inject_off_by_one.as_deref()),
        Command::Bench { reps } => {
            s.reps = reps.unwrap_or(s.reps);
            bench::run(&s)
        }
        Command::Plan { peak_flops, beta } => plan::run(&s, peak_flops, beta),
    }
}

fn main() -> ExitCode {
    flashsvd_core::parallel::init_thread_pool();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flashsvd: {e}");
            e.exit_code()
        }
    }
}
