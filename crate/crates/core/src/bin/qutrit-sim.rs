use clap::Parser;
use qutrit_sim::cli::{error_record, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            std::process::exit(1);
        }
    }
}
