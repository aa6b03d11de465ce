//! Thin process wrapper around the library's CLI module.

use clap::Parser;

fn main() {
    let cli = ssdca::cli::Cli::parse();
    if let Err(e) = ssdca::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
