use clap::Parser;
use egtas::cli::{run, Cli, EXIT_USAGE};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with a zero code; keep that,
            // but report genuine usage errors with exit code 1
            if e.use_stderr() {
                let _ = e.print();
                std::process::exit(EXIT_USAGE);
            }
            let _ = e.print();
            std::process::exit(0);
        }
    };
    std::process::exit(run(cli));
}
