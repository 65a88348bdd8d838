fn main() {
    std::process::exit(insiderlab_cli::run_cli(std::env::args_os()));
}
