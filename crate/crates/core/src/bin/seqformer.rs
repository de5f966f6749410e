fn main() -> std::process::ExitCode {
    seqformer_core::cli::main()
}
