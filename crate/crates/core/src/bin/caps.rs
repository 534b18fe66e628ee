fn main() {
    std::process::exit(caps_core::cli::run(std::env::args()));
}
