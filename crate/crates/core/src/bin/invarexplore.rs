fn main() {
    std::process::exit(invarexplore::cli::run(std::env::args_os()));
}
