fn main() -> std::process::ExitCode {
    fastfood_cli::main_with(std::env::args_os())
}
