use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = advpit_cli::Cli::parse();
    match advpit_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
