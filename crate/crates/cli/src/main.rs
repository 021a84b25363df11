fn main() -> std::process::ExitCode {
    gtt::app::main_with(std::env::args_os())
}
