fn main() {
    std::process::exit(bearlab::harness::cli::run(std::env::args_os()));
}
