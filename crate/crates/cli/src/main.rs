fn main() {
    std::process::exit(topklm_cli::cli::main_with_args(std::env::args_os()));
}
