// SPDX-License-Identifier: Apache-2.0

use std::process::ExitCode;

use clap::Parser;
use priorsense::cli::{run, Cli};

fn main() -> ExitCode {
    run(Cli::parse())
}
