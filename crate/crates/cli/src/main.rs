use std::io::Write as _;
use std::process::ExitCode;

use clap::Parser;
use shardwise_cli::commands::{self, Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Prints a line, ignoring a closed stdout (e.g. piped into `head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// `Ok(false)` for a completed run that failed its check.
fn run(command: &Command) -> anyhow::Result<bool> {
    match command {
        Command::Plan(args) => {
            let out = commands::plan(args)?;
            out!("plan written to {}", out.plan_path.display());
            out!("{}", out.summary.trim_end());
            Ok(true)
        }
        Command::Audit(args) => {
            let report = commands::audit(args)?;
            out!("{}", commands::render_audit(args, &report).trim_end());
            Ok(report.passed())
        }
        Command::Train(args) => {
            let out = commands::train(args)?;
            for line in &out.debug_trace {
                out!("{line}");
            }
            if let Some(loss) = out.final_loss() {
                out!("final loss {loss}");
            }
            if let Some(e) = out.summary.evals.last() {
                let metrics: Vec<String> = e.metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
                out!("eval_loss={} {}", e.eval_loss, metrics.join(" "));
            }
            out!("outputs in {}", out.workdir.display());
            Ok(true)
        }
        Command::Predict(args) => {
            for line in commands::predict(args)? {
                out!("{line}");
            }
            Ok(true)
        }
    }
}
