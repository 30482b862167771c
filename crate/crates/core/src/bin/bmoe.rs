fn main() {
    std::process::exit(butterfly_moe::cli::run(std::env::args_os()));
}
