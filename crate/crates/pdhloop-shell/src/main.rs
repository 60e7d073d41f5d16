use clap::Parser;
use pdhloop_shell::cli::{main_with, Cli};

fn main() {
    std::process::exit(main_with(Cli::parse()));
}
