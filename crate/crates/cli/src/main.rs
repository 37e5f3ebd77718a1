use clap::Parser;

fn main() {
    let cli = diat_cli::Cli::parse();
    if let Err(e) = diat_cli::run(cli) {
        eprintln!("{}", e.line());
        std::process::exit(e.kind.exit_code());
    }
}
