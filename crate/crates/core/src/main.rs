fn main() {
    std::process::exit(incremental_audio::cli::dispatch(std::env::args_os()));
}
