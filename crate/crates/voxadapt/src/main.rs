use clap::Parser;

use voxadapt::cli::{run, Cli};

fn main() {
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
