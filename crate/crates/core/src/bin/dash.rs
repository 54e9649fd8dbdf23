fn main() {
    std::process::exit(dash_core::cli::run(std::env::args_os()));
}
