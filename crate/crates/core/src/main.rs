fn main() {
    std::process::exit(dermaug::cli::run(std::env::args_os()));
}
