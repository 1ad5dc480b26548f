fn main() {
    std::process::exit(lsnb::cli::run(std::env::args_os()));
}
