use clap::Parser;

fn main() {
    let cli = uwnerf::cli::Cli::parse();
    if let Err(e) = uwnerf::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
