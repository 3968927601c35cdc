fn main() {
    env_logger::init();
    std::process::exit(axisline::cli::run_from(std::env::args_os()));
}
