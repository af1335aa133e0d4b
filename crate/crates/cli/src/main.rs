fn main() {
    std::process::exit(mcbd_cli::run(std::env::args_os()));
}
