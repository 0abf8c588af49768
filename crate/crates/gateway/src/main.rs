use std::process::ExitCode;

use clap::Parser;
use selfroute_gateway::cli::{run, Cli, Command, Context};
use tracing_subscriber::filter::LevelFilter;

fn init_logging(cli: &Cli) {
    let level = match &cli.command {
        Command::Serve(a) if !a.check => {
            Context::from_common(&cli.common).map(|c| c.config.log_level).unwrap_or_else(|_| "info".into())
        }
        _ => "warn".into(),
    };
    let filter = level.parse::<LevelFilter>().unwrap_or(LevelFilter::INFO);
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(filter).with_target(false).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    match run(&cli) {
        Ok(out) => {
            print!("{}", out.render(cli.common.json));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
