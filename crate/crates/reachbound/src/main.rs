use clap::Parser;

fn main() {
    let cli = reachbound::cli::Cli::parse();
    std::process::exit(reachbound::cli::run(&cli));
}
