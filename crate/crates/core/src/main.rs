fn main() {
    let code = copolymer::cli::run(std::env::args_os());
    std::process::exit(code);
}
