fn main() {
    std::process::exit(sonokey_cli::run(std::env::args_os()));
}
