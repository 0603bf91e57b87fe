fn main() {
    std::process::exit(stereofair::cli::run());
}
