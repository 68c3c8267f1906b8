fn main() {
    std::process::exit(riemctl::cli::cli_main(std::env::args_os()));
}
