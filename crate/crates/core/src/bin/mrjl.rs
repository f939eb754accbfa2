fn main() {
    std::process::exit(mrjl::cli::run(std::env::args_os()));
}
