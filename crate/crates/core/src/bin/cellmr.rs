fn main() {
    env_logger::init();
    std::process::exit(cellmr::cli::main_with_args(std::env::args_os()));
}
