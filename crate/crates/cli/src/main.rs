use clap::Parser;

fn main() {
    std::process::exit(obim_cli::run(obim_cli::Cli::parse()));
}
