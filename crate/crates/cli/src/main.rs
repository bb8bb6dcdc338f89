fn main() {
    std::process::exit(star_cli::dispatch(std::env::args_os()));
}
