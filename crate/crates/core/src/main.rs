fn main() {
    std::process::exit(semitrans::cli::main_with_args(std::env::args_os()));
}
