use std::process::ExitCode;

fn main() -> ExitCode {
    liteatt::cli::main_with(std::env::args_os())
}
