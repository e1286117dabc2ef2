fn main() {
    std::process::exit(icdm::cli::run(std::env::args_os()));
}
