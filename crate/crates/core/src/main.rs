fn main() {
    let code = fairpref::cli::run(std::env::args_os());
    std::process::exit(code);
}
