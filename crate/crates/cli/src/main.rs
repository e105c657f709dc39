fn main() -> std::process::ExitCode {
    routelab_cli::run(std::env::args_os())
}
