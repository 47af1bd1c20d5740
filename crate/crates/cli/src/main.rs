use std::process::ExitCode;

use clap::Parser;
use nucleisam_cli::commands::{error_record, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(1)
        }
    }
}
