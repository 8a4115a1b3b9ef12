use clap::Parser;
use etongue_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(out) => {
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&out.json).expect("json output")
                );
            } else if !out.text.is_empty() {
                print!("{}", out.text);
            }
        }
        Err(e) => {
            if json {
                let doc = serde_json::json!({"error": e.kind, "message": e.message});
                eprintln!("{doc}");
            } else {
                eprintln!(
                    "error ({}): {}",
                    serde_json::to_value(e.kind).unwrap().as_str().unwrap(),
                    e.message
                );
            }
            std::process::exit(e.exit_code());
        }
    }
}
