fn main() {
    std::process::exit(cemcd::cli::run(std::env::args_os()));
}
