fn main() {
    std::process::exit(toporel::cli::run(std::env::args_os()));
}
