fn main() {
    std::process::exit(regsing_cli::run(std::env::args_os()));
}
