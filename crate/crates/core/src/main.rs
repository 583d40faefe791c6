fn main() {
    std::process::exit(funnelscope::cli::run(std::env::args_os()));
}
