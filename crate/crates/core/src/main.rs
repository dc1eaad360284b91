fn main() -> std::process::ExitCode {
    gdpnet::cli::main()
}
