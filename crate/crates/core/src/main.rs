fn main() {
    std::process::exit(fgmix::cli::run_cli(std::env::args_os()));
}
