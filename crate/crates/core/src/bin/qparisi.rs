fn main() {
    std::process::exit(qparisi::cli::main_with_args(std::env::args_os()));
}
