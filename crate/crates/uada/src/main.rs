fn main() {
    std::process::exit(uada::cli::run(std::env::args_os()));
}
