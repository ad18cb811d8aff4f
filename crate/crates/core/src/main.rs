fn main() {
    std::process::exit(spn_core::cli::run(std::env::args_os()));
}
