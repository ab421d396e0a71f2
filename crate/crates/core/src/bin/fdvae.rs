fn main() {
    std::process::exit(fdvae::cli::main_with_args(std::env::args_os()));
}
