use clap::Parser;

fn main() {
    let cli = srlora_cli::Cli::parse();
    if let Err(e) = srlora_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
