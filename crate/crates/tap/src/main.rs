fn main() {
    std::process::exit(tap::cli::main_from_args(std::env::args()));
}
