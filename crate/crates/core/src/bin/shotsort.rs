fn main() {
    std::process::exit(shotsort::cli::run(std::env::args_os()));
}
