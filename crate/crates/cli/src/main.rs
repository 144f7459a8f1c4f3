fn main() {
    std::process::exit(promptbo_cli::dispatch(std::env::args_os()));
}
