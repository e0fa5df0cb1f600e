fn main() {
    std::process::exit(srim::cli::run(std::env::args_os(), std::env::vars()));
}
