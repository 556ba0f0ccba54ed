fn main() {
    std::process::exit(voxstyle_cli::run(std::env::args_os()));
}
