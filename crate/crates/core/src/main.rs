fn main() {
    std::process::exit(augsearch::cli::main_with_args(std::env::args_os()));
}
