use clap::Parser;

fn main() {
    let cli = deepwarp::run::Cli::parse();
    if let Err(e) = deepwarp::run::dispatch(cli) {
        // machine-readable error on stderr
        let payload = serde_json::json!({
            "error": e.code(),
            "message": e.to_string(),
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
