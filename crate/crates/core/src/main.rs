fn main() {
    std::process::exit(dppa::cli::main_with_args(std::env::args_os()));
}
