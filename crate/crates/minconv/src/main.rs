use std::process::ExitCode;

fn main() -> ExitCode {
    match minconv::cli::run_from(std::env::args()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
