fn main() {
    std::process::exit(stallbound::cli::main_with_args(std::env::args_os()));
}
