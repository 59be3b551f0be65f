use clap::Parser;

fn main() -> std::process::ExitCode {
    match cpdc::cli::run(cpdc::cli::Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
