fn main() {
    std::process::exit(causalpix_cli::main_with_args(std::env::args_os()));
}
