fn main() {
    std::process::exit(unidec::cli::main_with(std::env::args_os()));
}
