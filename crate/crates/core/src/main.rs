fn main() {
    std::process::exit(latent_ee::cli::run(std::env::args_os()));
}
