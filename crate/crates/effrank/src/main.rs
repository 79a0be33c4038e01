fn main() {
    std::process::exit(effrank::cli::run(std::env::args_os()));
}
