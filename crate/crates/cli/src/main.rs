use clap::Parser;
use cocycle_cli::{execute, Cli};

fn main() {
    std::process::exit(execute(Cli::parse()));
}
