use std::process::ExitCode;

fn main() -> ExitCode {
    advseq::cli::run()
}
