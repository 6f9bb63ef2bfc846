fn main() {
    std::process::exit(geat::cli::run(std::env::args_os()));
}
