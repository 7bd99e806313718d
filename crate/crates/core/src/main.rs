use clap::Parser;

use atomdeconv::cli::{configure_threads, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|()| run(cli)) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
