fn main() {
    std::process::exit(dtst::cli::run(std::env::args_os()));
}
