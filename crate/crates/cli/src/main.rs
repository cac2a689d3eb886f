fn main() {
    std::process::exit(biasprior_cli::run_from_args(std::env::args_os()));
}
