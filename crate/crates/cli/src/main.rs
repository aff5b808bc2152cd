use std::process::ExitCode;

use clap::Parser;
use mter_cli::args::{Cli, Command};
use mter_cli::{attack, eval, resolve_config, train, CliError, CliResult};

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = resolve_config(a.common.config.as_deref(), &a.overrides().map_err(CliError::User)?)?;
            let o = train::run(&cfg)?;
            println!("checkpoint {}", o.checkpoint.display());
            println!("log {}", o.log.display());
        }
        Command::Attack(a) => {
            let cfg = resolve_config(a.common.config.as_deref(), &a.overrides().map_err(CliError::User)?)?;
            let o = attack::run(&cfg)?;
            println!("{}", o.summary);
            println!("images {}", o.images.display());
        }
        Command::Eval(a) => {
            let cfg = resolve_config(a.common.config.as_deref(), &a.overrides().map_err(CliError::User)?)?;
            for p in eval::run(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose as i32 - cli.quiet as i32 {
        i32::MIN..=-2 => "error",
        -1 => "warn",
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match std::panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(2),
    }
}
