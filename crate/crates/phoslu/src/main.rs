//! Binary entry point: parse the command line, dispatch, and map any error
//! to a one-line diagnostic with a non-zero exit code.

use clap::Parser;

use phoslu::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
