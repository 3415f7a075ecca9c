use clap::Parser;

fn main() {
    let cli = charlab::cli::Cli::parse();
    std::process::exit(charlab::cli::run_with_exit_code(cli));
}
