fn main() {
    std::process::exit(racnn::cli::run(std::env::args_os()));
}
