use std::process::ExitCode;

fn main() -> ExitCode {
    fedarena::cli::main_from(std::env::args_os()).into()
}
