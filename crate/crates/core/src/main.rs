use std::process::exit;

fn main() {
    exit(egru_lm::cli::dispatch(std::env::args_os()));
}
