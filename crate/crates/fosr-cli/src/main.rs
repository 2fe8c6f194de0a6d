use clap::Parser;
use fosr_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let payload = serde_json::json!({
            "error": format!("{err:#}"),
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
