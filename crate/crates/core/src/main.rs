fn main() {
    std::process::exit(stormdet::run_cli());
}
