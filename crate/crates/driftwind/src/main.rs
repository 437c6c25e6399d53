use clap::Parser;
use driftwind::cli;

fn main() {
    // All parallelism lives in rayon; keep BLAS single-threaded.
    std::env::set_var("OPENBLAS_NUM_THREADS", "1");
    let args = cli::Cli::parse();
    if let Err(err) = cli::run(args) {
        eprintln!("{}", cli::error_record(&err));
        std::process::exit(cli::exit_code(&err));
    }
}
