fn main() -> std::process::ExitCode {
    gfrnn::cli::main_entry()
}
