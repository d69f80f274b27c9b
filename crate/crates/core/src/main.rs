fn main() {
    std::process::exit(optibox::cli::run(std::env::args_os().skip(1)));
}
