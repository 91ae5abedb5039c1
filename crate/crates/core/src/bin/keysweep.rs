fn main() {
    std::process::exit(keysweep::cli::main());
}
