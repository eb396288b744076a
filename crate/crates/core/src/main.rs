fn main() {
    std::process::exit(mile_core::cli::run(std::env::args_os()));
}
