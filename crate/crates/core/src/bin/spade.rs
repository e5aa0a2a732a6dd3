fn main() {
    std::process::exit(spade::cli::run(std::env::args_os()));
}
