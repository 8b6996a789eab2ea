fn main() {
    std::process::exit(nowcast_core::cli::main());
}
