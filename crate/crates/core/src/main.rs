fn main() {
    std::process::exit(refine::cli::run(std::env::args_os()));
}
