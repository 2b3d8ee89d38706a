fn main() -> std::process::ExitCode {
    shrink::cli::main_with(std::env::args_os())
}
