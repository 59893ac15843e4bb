fn main() {
    std::process::exit(aurec::cli::main());
}
