fn main() {
    std::process::exit(gdpo_cli::app::run(std::env::args_os()));
}
