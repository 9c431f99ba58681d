fn main() {
    std::process::exit(proximity::runner::run_command(std::env::args_os()));
}
