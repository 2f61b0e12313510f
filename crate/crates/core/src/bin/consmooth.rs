fn main() {
    std::process::exit(consmooth::cli::run(std::env::args_os()));
}
