fn main() {
    std::process::exit(qpt_core::cli::main_with(std::env::args_os()));
}
