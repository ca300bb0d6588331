fn main() {
    std::process::exit(veil::cli::run(std::env::args_os()));
}
