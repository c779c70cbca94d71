mod cli;

use clap::Parser;

fn main() {
    let args = cli::Cli::parse();
    if let Err(e) = cli::run(args) {
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error: {}: {msg}", e.kind());
        std::process::exit(1);
    }
}
