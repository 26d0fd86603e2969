fn main() -> std::process::ExitCode {
    incft::cli::main_with_args(std::env::args_os())
}
