fn main() {
    if let Err(e) = selfmon::cli::run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
