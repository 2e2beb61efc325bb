use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nhcl::cli::{resolve_out_dir, run, Command, ScenarioConfig, OUT_DIR_ENV};

/// Null-controllability experiments for the 1D nonlocal heat equation.
#[derive(Parser)]
#[command(name = "nhcl", version, about)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON scenario config
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `output_dir`)
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = ScenarioConfig::from_path(&args.config).and_then(|cfg| {
        let out = resolve_out_dir(args.out, &cfg);
        run(args.command, &cfg, &out).map(|files| (out, files))
    });
    match result {
        Ok((out, files)) => {
            println!("wrote {} files to {}", files.len(), out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
