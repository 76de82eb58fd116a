fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(qlip::cli::run(&argv));
}
