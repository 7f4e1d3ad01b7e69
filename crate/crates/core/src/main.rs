fn main() {
    std::process::exit(repden::cli::run(std::env::args_os()));
}
