fn main() {
    std::process::exit(nsl_cli::run(std::env::args_os()));
}
