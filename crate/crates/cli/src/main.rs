fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UIDLM_LOG", "info")).init();
    std::process::exit(uidlm_cli::run(std::env::args_os()));
}
