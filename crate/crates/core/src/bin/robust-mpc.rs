use clap::Parser;

fn main() {
    std::process::exit(robust_mpc::cli::main_with(robust_mpc::cli::Args::parse()));
}
