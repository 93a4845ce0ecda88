use std::path::PathBuf;
use std::process::ExitCode;

use asrtl::pipeline::{run_all, run_stage, ExperimentConfig, PipelineError, Stage};
use clap::Parser;

/// Runs one pipeline stage, or `all` of them in order.
#[derive(Parser, Debug)]
#[command(name = "asrtl", version)]
struct Cli {
    /// Stage name (gen-corpus, prep, train-gmm, train-ivector, train-parent,
    /// transfer-train, decode, score, report) or `all`.
    stage: String,
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = ExperimentConfig::load(&cli.config, &cli.overrides)?;
    if cli.stage == "all" {
        return run_all(&cfg, |stage, ran| {
            eprintln!("{stage}: {}", if ran { "done" } else { "up to date" });
        });
    }
    let stage: Stage = cli.stage.parse()?;
    let t = std::time::Instant::now();
    run_stage(stage, &cfg)?;
    eprintln!("{stage}: done in {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
