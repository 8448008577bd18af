use std::process::ExitCode;

fn main() -> ExitCode {
    spe_cli::run(std::env::args_os())
}
