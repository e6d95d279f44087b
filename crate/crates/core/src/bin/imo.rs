fn main() {
    std::process::exit(imo::cli::main_with_args(std::env::args_os()));
}
