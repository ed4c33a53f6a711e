fn main() {
    std::process::exit(reage::cli::run(std::env::args_os()));
}
