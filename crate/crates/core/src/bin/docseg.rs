fn main() {
    std::process::exit(docseg::cli::run(std::env::args_os()));
}
