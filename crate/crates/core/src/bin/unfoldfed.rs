use std::process::ExitCode;

use clap::Parser;
use unfoldfed::cli::{execute, exit_code, Cli, EXIT_VERIFICATION};

fn run(cli: &Cli) -> anyhow::Result<u8> {
    Ok(execute(cli)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            // the library error already carries its source in the message
            eprintln!("error: {err}");
            let code = err
                .downcast_ref::<unfoldfed::Error>()
                .map_or(EXIT_VERIFICATION, exit_code);
            ExitCode::from(code)
        }
    }
}
