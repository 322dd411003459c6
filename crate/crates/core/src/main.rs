fn main() {
    std::process::exit(mhe_soc::harness::cli::run(std::env::args_os()));
}
