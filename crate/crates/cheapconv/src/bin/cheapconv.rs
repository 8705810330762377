fn main() {
    std::process::exit(cheapconv::cli::run());
}
