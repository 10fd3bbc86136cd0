use std::process::ExitCode;

use clap::Parser;
use visrep::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli).map_err(anyhow::Error::from) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<visrep::Error>().map_or(1, visrep::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
