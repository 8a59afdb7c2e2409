fn main() {
    std::process::exit(st_impute::cli::main_with_args(std::env::args_os()));
}
