use std::process::exit;

use clap::Parser;

use twoscale::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = cli::run(cli) {
        eprintln!("error: {e}");
        exit(cli::exit_code(&e));
    }
}
