fn main() {
    std::process::exit(spinread::cli::main_with_args(std::env::args_os()));
}
