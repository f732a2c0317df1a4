fn main() {
    std::process::exit(optexec::cli::main_with_args(std::env::args_os()));
}
