fn main() {
    std::process::exit(attn_disagree::cli::run(std::env::args_os()));
}
