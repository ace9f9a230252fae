fn main() {
    std::process::exit(aapt_cli::main_with_args(std::env::args_os()));
}
