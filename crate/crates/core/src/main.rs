fn main() {
    std::process::exit(seesaw_core::cli::main_with_args(std::env::args_os()));
}
