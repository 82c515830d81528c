fn main() {
    std::process::exit(lait::cli::run_cli(std::env::args_os()));
}
