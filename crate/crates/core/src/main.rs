fn main() {
    std::process::exit(melmix::cli::run(std::env::args_os()));
}
