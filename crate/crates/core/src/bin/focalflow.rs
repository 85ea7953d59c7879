fn main() {
    std::process::exit(focalflow::cli::run(std::env::args_os()));
}
