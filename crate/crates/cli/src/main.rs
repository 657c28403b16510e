use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match dscm_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { dscm_cli::EXIT_VALIDATION } else { dscm_cli::EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dscm_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(dscm_cli::exit_code(&e));
    }
}
