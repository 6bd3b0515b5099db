fn main() {
    std::process::exit(persp3d::cli::run(std::env::args_os()));
}
