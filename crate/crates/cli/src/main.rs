fn main() {
    std::process::exit(rrsearch_cli::main_with_args(std::env::args_os()));
}
