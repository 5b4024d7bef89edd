fn main() {
    std::process::exit(curvecast::cli::run(std::env::args_os()));
}
