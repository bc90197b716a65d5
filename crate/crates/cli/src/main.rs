use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use relaxctl_cli::{run, Command, RunOptions};

/// Relaxed stochastic control experiments on built-in problems.
#[derive(Debug, Parser)]
#[command(name = "relaxctl", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Print nothing on success.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let opts = RunOptions { config: args.config, out: args.out, seed: args.seed };
    match run(args.command, &opts) {
        Ok(outcome) => {
            if !args.quiet || !outcome.pass {
                let status = if outcome.pass { "PASS" } else { "FAIL" };
                println!("{} {status}", args.command.name());
                if let Some(contracts) = outcome.report["contracts"].as_object() {
                    for (name, ok) in contracts {
                        println!("  {name}: {}", if ok.as_bool() == Some(true) { "ok" } else { "FAILED" });
                    }
                }
                println!("  wrote {} to {}", outcome.files.join(", "), opts.out.display());
            }
            if outcome.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
