use clap::Parser;

use istft::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("istft: {e}");
        std::process::exit(e.exit_code());
    }
}
