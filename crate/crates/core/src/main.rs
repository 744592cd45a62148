fn main() {
    std::process::exit(dcmm_transfer::cli::main_with_args(std::env::args_os()));
}
