fn main() {
    std::process::exit(vec2instance::cli::run(std::env::args_os()));
}
