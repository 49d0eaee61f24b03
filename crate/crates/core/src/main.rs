fn main() {
    std::process::exit(cktf::harness::cli::run_cli(std::env::args_os()));
}
