use std::process::ExitCode;

fn main() -> ExitCode {
    vc::cli::main()
}
