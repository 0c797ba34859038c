use clap::Parser;
use env_logger::Env;
use pwa_nav::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(Env::new().filter_or("PWA_NAV_LOG", "warn")).init();
    std::process::exit(run(Cli::parse()));
}
