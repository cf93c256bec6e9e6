fn main() {
    std::process::exit(quantsparse::harness::cli_main(std::env::args_os()));
}
