// SPDX-License-Identifier: MIT OR Apache-2.0

use clap::Parser;
use conceptdrive::commands::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
