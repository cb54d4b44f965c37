fn main() {
    std::process::exit(carreg::cli::run(std::env::args_os()));
}
