use std::process::ExitCode;

use debias_cli::CliError;

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("DEBIAS_THREADS") else { return Ok(()) };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("DEBIAS_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let outcome = init_threads().map(|()| debias_cli::run(std::env::args_os()));
    let result = match outcome {
        Ok(Ok(r)) => r,
        Ok(Err(clap_err)) => {
            let _ = clap_err.print();
            return ExitCode::from(if clap_err.use_stderr() { 1 } else { 0 });
        }
        Err(e) => Err(e),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
