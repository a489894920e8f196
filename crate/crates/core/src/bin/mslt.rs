fn main() {
    std::process::exit(mslt::cli::main_with_args(std::env::args_os()));
}
