fn main() {
    std::process::exit(fetwfe_cli::run(std::env::args_os()));
}
