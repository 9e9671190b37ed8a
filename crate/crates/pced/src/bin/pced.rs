fn main() {
    std::process::exit(pced::cli::main_with_args(std::env::args_os()));
}
