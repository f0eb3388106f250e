use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = acflow_cli::Cli::parse();
    match acflow_cli::run(&cli) {
        Ok(manifest) => log::info!("wrote {}", manifest.display()),
        Err(e) => {
            eprintln!("acflow: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
