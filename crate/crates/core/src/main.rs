fn main() {
    std::process::exit(shiftlab::cli::run_from_args(std::env::args_os()));
}
