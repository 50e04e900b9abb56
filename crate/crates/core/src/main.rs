use std::process::ExitCode;

fn main() -> ExitCode {
    voxfield::cli::main_with_args(std::env::args_os())
}
