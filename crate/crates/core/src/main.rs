fn main() {
    std::process::exit(oodalign::cli::main());
}
