use clap::Parser;
use dualcloak_cli::{exit_code, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = run(&cli);
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    if let Ok(m) = &result {
        for item in m.items.iter().filter(|i| i.error.is_some()) {
            eprintln!("failed: {}", item.error.as_deref().unwrap_or_default());
        }
    }
    std::process::exit(exit_code(&result));
}
