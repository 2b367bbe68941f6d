fn main() {
    std::process::exit(cormpo::cli::run(std::env::args_os()));
}
