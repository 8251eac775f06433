fn main() -> std::process::ExitCode {
    ncsim::cli::main()
}
