fn main() {
    std::process::exit(nas_adapt::cli::main_with_args(std::env::args_os()));
}
