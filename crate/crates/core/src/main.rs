fn main() {
    std::process::exit(cascade3d::cli::main());
}
