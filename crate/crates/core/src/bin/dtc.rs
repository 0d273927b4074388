fn main() {
    std::process::exit(dtclab::cli::run_cli(std::env::args_os()));
}
