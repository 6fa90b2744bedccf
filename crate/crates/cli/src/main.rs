fn main() {
    std::process::exit(gmix_cli::run(std::env::args_os()));
}
