use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(fluidmc::cli::run() as u8)
}
