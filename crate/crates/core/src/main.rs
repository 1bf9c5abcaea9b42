fn main() {
    std::process::exit(mmwfm::cli::run_from_args(std::env::args_os()));
}
