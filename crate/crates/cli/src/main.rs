fn main() {
    std::process::exit(spangen_cli::main_with(std::env::args_os()));
}
