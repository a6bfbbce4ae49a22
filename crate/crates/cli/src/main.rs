fn main() {
    std::process::exit(anticipate_cli::main_with(std::env::args_os()));
}
