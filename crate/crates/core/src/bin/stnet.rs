fn main() {
    std::process::exit(stnet::cli::run(std::env::args_os()));
}
