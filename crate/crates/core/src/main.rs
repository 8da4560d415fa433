fn main() {
    std::process::exit(fairmargin::cli::run(std::env::args_os()));
}
