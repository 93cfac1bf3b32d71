fn main() {
    std::process::exit(mgaf::cli::run(std::env::args_os()));
}
