use clap::Parser;
use tokencompose::cli::{exit_code, run, Cli, DETERMINISTIC_ENV};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1") {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
