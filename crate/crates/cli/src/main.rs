fn main() {
    std::process::exit(smartcampus_cli::run(std::env::args_os()));
}
