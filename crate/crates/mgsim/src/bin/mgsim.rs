fn main() {
    std::process::exit(mgsim::cli::run());
}
