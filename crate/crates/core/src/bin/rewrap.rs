fn main() -> std::process::ExitCode {
    rewrap::cli::main()
}
