fn main() -> std::process::ExitCode {
    pointcat::cli::main()
}
