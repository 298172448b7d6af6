use clap::Parser;

use desk_iba::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("desk-iba: error: {e}");
        std::process::exit(exit_code(&e));
    }
}
