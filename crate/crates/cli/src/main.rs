fn main() {
    std::process::exit(bsap_cli::run(std::env::args_os()));
}
