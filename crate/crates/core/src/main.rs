fn main() {
    std::process::exit(mnkit::cli::run(std::env::args_os()));
}
