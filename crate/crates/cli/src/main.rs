use std::process::exit;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    exit(infusion_cli::run_cli(&args));
}
