fn main() {
    std::process::exit(selfnom::cli::run());
}
