fn main() {
    std::process::exit(vmat_latent::cli::run(std::env::args_os()));
}
