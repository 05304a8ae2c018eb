use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::new().filter_or("RSFACTOR_LOG", "info"))
        .format_timestamp(None)
        .init();
    std::process::exit(rsfactor_cli::run(std::env::args_os()));
}
