fn main() {
    std::process::exit(iaunet::cli::run(std::env::args_os()));
}
