fn main() {
    std::process::exit(tumorseg::cli::run(std::env::args_os()));
}
