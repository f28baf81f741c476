fn main() {
    std::process::exit(tempodet_cli::run(std::env::args_os()));
}
