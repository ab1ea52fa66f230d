fn main() {
    std::process::exit(mrisynth_cli::run(std::env::args_os()));
}
