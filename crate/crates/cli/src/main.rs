use clap::Parser;
use surgphase_cli::{error_line, exit_code, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            std::process::exit(2);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", error_line(&e));
        std::process::exit(exit_code(&e));
    }
}
