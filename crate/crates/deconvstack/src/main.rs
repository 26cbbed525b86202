fn main() {
    std::process::exit(deconvstack::cli::run(std::env::args_os()));
}
