fn main() {
    std::process::exit(rigsdf_cli::main_with_args(std::env::args_os()));
}
