fn main() {
    std::process::exit(fjsp_rl::cli::run_cli(std::env::args_os()));
}
