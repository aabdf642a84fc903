fn main() {
    std::process::exit(portrait_cli::run_cli(std::env::args_os()));
}
