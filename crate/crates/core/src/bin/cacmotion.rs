fn main() {
    std::process::exit(cacmotion::cli::main_with_args(std::env::args_os()));
}
