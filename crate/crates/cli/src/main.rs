use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = ptnet_cli::Cli::parse();
    if let Err(e) = ptnet_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(ptnet_cli::exit_code(&e));
    }
}
