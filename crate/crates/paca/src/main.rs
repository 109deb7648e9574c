fn main() {
    std::process::exit(paca::cli::run(std::env::args().collect()));
}
