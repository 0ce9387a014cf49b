fn main() {
    std::process::exit(wbm_core::cli::run(std::env::args_os()));
}
