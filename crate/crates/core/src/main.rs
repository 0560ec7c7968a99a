fn main() {
    std::process::exit(aesurv::cli::run(std::env::args_os()));
}
