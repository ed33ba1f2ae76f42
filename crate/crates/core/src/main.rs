fn main() {
    std::process::exit(afss::iocli::cli_main(std::env::args_os()));
}
