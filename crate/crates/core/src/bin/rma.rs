fn main() {
    std::process::exit(rma::cli::main_with_args(std::env::args_os()));
}
