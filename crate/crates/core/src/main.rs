fn main() -> std::process::ExitCode {
    consistency_probe::cli::main_with_args(std::env::args_os())
}
