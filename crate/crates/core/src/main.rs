fn main() {
    std::process::exit(cascadet::cli::run());
}
