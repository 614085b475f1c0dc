fn main() {
    std::process::exit(tds_cli::run(std::env::args_os()));
}
