use clap::Parser;

fn main() {
    let cli = evsnn::cli::Cli::parse();
    if let Err(e) = evsnn::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
