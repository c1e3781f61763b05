use std::process::ExitCode;

use clap::Parser;
use colflux::{run, Cli, UsageError};

fn error_line(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            error_line("usage", &e.kind().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            error_line("usage", &format!("{e:#}"));
            ExitCode::from(2)
        }
        Err(e) => {
            error_line("runtime", &format!("{e:#}"));
            ExitCode::from(1)
        }
    }
}
