fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(hywu_cli::run(&argv));
}
