use std::process::ExitCode;

fn main() -> ExitCode {
    ldsr::cli::run(std::env::args_os())
}
