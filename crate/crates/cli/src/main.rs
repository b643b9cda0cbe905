fn main() {
    std::process::exit(propkit_cli::main_with(std::env::args_os()));
}
