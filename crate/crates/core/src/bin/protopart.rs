fn main() {
    std::process::exit(protopart::cli::run_cli(std::env::args().collect()));
}
