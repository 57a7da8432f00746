fn main() {
    std::process::exit(sada::cli::main_with_args(std::env::args_os()));
}
