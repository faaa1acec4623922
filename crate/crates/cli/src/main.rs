fn main() {
    std::process::exit(cmmp::main_with_args(std::env::args_os()));
}
