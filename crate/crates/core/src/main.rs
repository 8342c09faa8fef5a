fn main() {
    std::process::exit(retrorank::cli::run(std::env::args_os()));
}
