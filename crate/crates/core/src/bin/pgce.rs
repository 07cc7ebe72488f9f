use std::process::ExitCode;

fn main() -> ExitCode {
    pgce::cli::run_from_args(std::env::args_os())
}
