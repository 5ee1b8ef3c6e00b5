fn main() {
    std::process::exit(rlda::cli::run(std::env::args_os()));
}
