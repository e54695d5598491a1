mod args;
mod commands;

use std::panic;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<terraseg_core::Error>() {
        Some(e) if e.is_usage() => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(terraseg_core::Error::InvalidArgument("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Segment(a) => commands::segment(a)?,
        Command::Eval(a) => commands::eval(a)?,
        Command::Sweep(a) => commands::sweep(a)?,
        Command::Overlay(a) => commands::overlay_cmd(a)?,
        Command::Synth(a) => commands::synth(a)?,
        Command::InspectFeatures(a) => {
            let bad = commands::inspect(a)?;
            if bad > 0 {
                eprintln!("{bad} problem(s) found");
                return Ok(EXIT_DATA);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match panic::catch_unwind(|| run(cli)) {
        Ok(Ok(code)) => ExitCode::from(code),
        Ok(Err(e)) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
        Err(_) => {
            eprintln!("error: internal failure (this is a bug)");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
