fn main() {
    std::process::exit(kiprn::cli::run(std::env::args_os()));
}
