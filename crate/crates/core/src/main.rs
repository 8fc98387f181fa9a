fn main() {
    std::process::exit(erc_core::cli::main_with(std::env::args_os()));
}
