//! `mathq` binary entry point; all behavior lives in the `cli` module.

mod cli;

use std::process::ExitCode;

fn main() -> ExitCode {
    cli::run()
}
