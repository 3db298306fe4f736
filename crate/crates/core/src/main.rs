fn main() {
    std::process::exit(woodprune::cli::main_with_args(std::env::args_os()));
}
