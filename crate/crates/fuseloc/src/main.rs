use clap::Parser;

fn main() {
    let cli = fuseloc::commands::Cli::parse();
    std::process::exit(fuseloc::commands::run(cli));
}
