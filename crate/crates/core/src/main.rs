use pds_core::cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("PDS_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("pds: cannot size the thread pool: {e}");
                }
            }
            _ => {
                eprintln!("pds: PDS_THREADS must be a positive integer, got `{v}`");
                std::process::exit(cli::EXIT_CONFIG);
            }
        }
    }
    std::process::exit(cli::run(std::env::args_os()));
}
