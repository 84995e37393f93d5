fn main() {
    std::process::exit(protomiss::main_with_args(std::env::args_os()));
}
