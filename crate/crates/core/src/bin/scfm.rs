use std::process::ExitCode;

fn main() -> ExitCode {
    if let Err(e) = scfm::cli::init_thread_pool_from_env() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let outcome = scfm::cli::dispatch(std::env::args_os());
    ExitCode::from(outcome.exit_code as u8)
}
