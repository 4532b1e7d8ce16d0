use std::process::ExitCode;

use clap::Parser;

use vitae_cli::{exit_code, run, Cli};

/// Caps the worker pool at `VITAE_THREADS` when set.
fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("VITAE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow::anyhow!("VITAE_THREADS must be a positive integer, got {value:?}"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| run(cli.command));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
