fn main() {
    std::process::exit(deepvote::cli::run(std::env::args_os()));
}
