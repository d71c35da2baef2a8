fn main() {
    std::process::exit(bricks_cli::run(std::env::args_os()));
}
