fn main() {
    std::process::exit(gapforge::cli::run(std::env::args_os()));
}
