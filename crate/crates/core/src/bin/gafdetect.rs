use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(gafdetect::evalcli::cli_main(std::env::args_os()) as u8)
}
