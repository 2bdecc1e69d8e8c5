use std::process::ExitCode;

fn main() -> ExitCode {
    onepass::cli::main()
}
