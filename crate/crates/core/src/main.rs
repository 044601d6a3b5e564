fn main() {
    std::process::exit(prosody_mdn::cli::main_with_args(std::env::args_os()));
}
