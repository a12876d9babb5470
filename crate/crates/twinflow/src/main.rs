use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(twinflow::cli::run(std::env::args()) as u8)
}
