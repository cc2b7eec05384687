fn main() {
    std::process::exit(reid_cli::run(std::env::args_os()));
}
