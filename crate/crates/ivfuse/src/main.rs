fn main() {
    std::process::exit(ivfuse::cli::run_cli(std::env::args_os()));
}
