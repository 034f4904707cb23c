fn main() {
    std::process::exit(offtarget::cli::run(std::env::args_os()));
}
