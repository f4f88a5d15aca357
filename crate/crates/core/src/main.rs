fn main() {
    std::process::exit(wsckit::cli::run(std::env::args_os()));
}
