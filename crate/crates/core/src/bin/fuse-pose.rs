fn main() {
    std::process::exit(fuse_pose::cli::run(std::env::args_os()));
}
