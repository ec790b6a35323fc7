fn main() {
    std::process::exit(coe::cli::run(std::env::args_os()));
}
