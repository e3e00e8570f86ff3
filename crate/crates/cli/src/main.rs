fn main() {
    std::process::exit(avsol_cli::run(std::env::args_os()));
}
