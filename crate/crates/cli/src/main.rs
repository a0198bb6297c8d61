fn main() {
    std::process::exit(smlw_cli::run(std::env::args_os()));
}
