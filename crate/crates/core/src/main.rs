fn main() {
    std::process::exit(voxseg::cli::run_cli(std::env::args_os()));
}
