fn main() {
    std::process::exit(mimi::cli::main_with_args(std::env::args_os()));
}
