fn main() {
    std::process::exit(gt360_cli::run(std::env::args_os()));
}
