use clap::Parser;
use volnet_cli::{execute, init_threads, Cli, EXIT_CONFIG, THREADS_ENV};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = init_threads(std::env::var(THREADS_ENV).ok().as_deref()) {
        eprintln!("error: {e}");
        std::process::exit(EXIT_CONFIG);
    }
    let code = execute(&cli, &mut std::io::stdout().lock());
    std::process::exit(code);
}
