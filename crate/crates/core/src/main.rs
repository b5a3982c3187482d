fn main() {
    std::process::exit(ponderbench::harness::run_cli(std::env::args_os()));
}
