fn main() {
    env_logger::init();
    std::process::exit(mira_core::harness::cli_main(std::env::args_os()));
}
