fn main() {
    std::process::exit(heartnet::cli::run(std::env::args_os()));
}
