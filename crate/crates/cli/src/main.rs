use clap::Parser;
use voxgan_cli::{commands, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = commands::run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
