//! Pipeline entry point. Parses the subcommand, runs it, and reports any
//! failure as a single JSON object on stderr so callers can parse it.

use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = backroad::cli::Cli::parse();
    if let Err(e) = backroad::cli::run(cli) {
        let msg = serde_json::json!({ "error": e.to_string() });
        eprintln!("{msg}");
        std::process::exit(1);
    }
}
