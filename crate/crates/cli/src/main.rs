fn main() {
    std::process::exit(cxrinf_cli::run(std::env::args_os()));
}
