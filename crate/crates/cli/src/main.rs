fn main() {
    std::process::exit(randpercep_cli::main_with_args(std::env::args_os()));
}
