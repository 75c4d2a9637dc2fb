use clap::Parser;
use esg_cli::{init_logging, run, Cli, Command};

fn main() {
    let cli = Cli::parse();
    if matches!(
        cli.command,
        Command::ServeApi(_) | Command::ServeWorker(_) | Command::ServeGc(_) | Command::ServeStore(_)
    ) {
        init_logging();
    }
    // Not locked for the whole run: log output from other threads shares stdout.
    if let Err(failure) = run(cli, &mut std::io::stdout()) {
        eprintln!("esg: {}", failure.message);
        std::process::exit(failure.code);
    }
}
