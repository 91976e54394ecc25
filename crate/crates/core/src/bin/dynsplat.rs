fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = dynsplat::cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
