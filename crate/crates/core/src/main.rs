fn main() {
    std::process::exit(csi_feedback::cli::run(std::env::args_os()));
}
