fn main() {
    std::process::exit(baaf::cli::run());
}
