fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KPC_LOG_LEVEL", "warn")).init();
    std::process::exit(kpc::cli::dispatch(std::env::args_os()));
}
