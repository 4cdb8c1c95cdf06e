fn main() {
    let code = ain::cli::run(std::env::args_os());
    std::process::exit(code);
}
