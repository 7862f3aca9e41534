use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSAKV_LOG", "warn")).init();
    // Let clap handle --help, --version and usage errors with its own exit codes.
    if let Err(e) = dsakv_cli::Cli::try_parse() {
        e.exit();
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dsakv_cli::run(&args) {
        Ok(outcome) => println!("{}", outcome.message),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
