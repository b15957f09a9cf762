fn main() {
    std::process::exit(redf::cli::run(std::env::args_os()));
}
