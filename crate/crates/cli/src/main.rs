use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ifclust::run(std::env::args_os()))
}
