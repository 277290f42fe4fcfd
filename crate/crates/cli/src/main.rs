fn main() {
    std::process::exit(jewelcap_cli::run(std::env::args_os()));
}
