fn main() {
    std::process::exit(collab_cli::run(std::env::args_os()));
}
