fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    if let Ok(n) = std::env::var("HIPPRO_THREADS") {
        let n = n.parse::<usize>().unwrap_or(1).max(1);
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::process::exit(hippro::cli::run(std::env::args_os()));
}
