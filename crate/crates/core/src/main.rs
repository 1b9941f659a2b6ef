fn main() {
    std::process::exit(mpcsieve::cli::main_with(std::env::args_os()));
}
