use clap::Parser;
use coldfed::cli::{error_record, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{}", error_record(&err));
        std::process::exit(err.exit_code());
    }
}
