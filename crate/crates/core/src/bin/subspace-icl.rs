fn main() {
    std::process::exit(subspace_icl::cli::run_cli(std::env::args_os()));
}
