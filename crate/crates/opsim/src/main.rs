fn main() {
    std::process::exit(opsim::cli::main_with(std::env::args_os()));
}
