use clap::Parser;

fn main() {
    std::process::exit(page_cli::run(page_cli::Cli::parse()));
}
