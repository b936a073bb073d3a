fn main() {
    std::process::exit(dbtnet::cli::run(std::env::args_os()));
}
