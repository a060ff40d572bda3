use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(sbl_cli::run(std::env::args_os()))
}
