fn main() {
    std::process::exit(ensemblekit::cli::main());
}
