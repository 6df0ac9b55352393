fn main() {
    std::process::exit(encprompt::cli::main_with_std());
}
