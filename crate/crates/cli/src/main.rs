fn main() {
    std::process::exit(mixkit_cli::run_cli(std::env::args_os()));
}
