fn main() {
    std::process::exit(pbm::cli::main());
}
