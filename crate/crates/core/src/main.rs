fn main() {
    std::process::exit(splatforge::cli::run(std::env::args_os()));
}
