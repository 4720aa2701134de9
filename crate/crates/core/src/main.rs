fn main() {
    std::process::exit(gradfree::cli::run(std::env::args_os()));
}
