use clap::Parser;

fn main() {
    let cli = zrplab::cli::Cli::parse();
    std::process::exit(zrplab::cli::main_with(cli));
}
