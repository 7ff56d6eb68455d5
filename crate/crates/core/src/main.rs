use std::process::ExitCode;

fn main() -> ExitCode {
    reaps::cli::run(std::env::args_os())
}
