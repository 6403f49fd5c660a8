fn main() {
    std::process::exit(cotree::commands::main_with_args(std::env::args_os()));
}
