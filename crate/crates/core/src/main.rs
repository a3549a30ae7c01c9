fn main() {
    std::process::exit(mpox_screen::cli::run(std::env::args_os()));
}
