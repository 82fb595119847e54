fn main() {
    std::process::exit(analog_md::cli::main_with_args(std::env::args_os()));
}
