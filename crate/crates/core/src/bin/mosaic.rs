fn main() {
    std::process::exit(audiomosaic::cli::run(std::env::args_os()));
}
