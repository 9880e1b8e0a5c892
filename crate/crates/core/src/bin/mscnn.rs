fn main() {
    std::process::exit(mscnn::cli::run(std::env::args_os()));
}
