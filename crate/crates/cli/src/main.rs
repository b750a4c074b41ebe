fn main() {
    std::process::exit(xdesc_cli::run(std::env::args_os()));
}
