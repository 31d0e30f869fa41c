use clap::Parser;
use penn_mpc::cli::{run, Cli};
use penn_mpc::report::write_failure;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {e}");
            write_failure(&cli.out, code, &e.to_string());
            std::process::exit(code);
        }
    }
}
