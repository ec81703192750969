use clap::Parser;
use helpdesk_server::cli::{self, Cli, Command, EXIT_CONFIG, EXIT_FAILURE};
use helpdesk_server::ServeError;
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();

    let args = Cli::parse();
    let code = match args.command {
        Command::Serve { config } => match cli::load_config(&config) {
            Err(e) => {
                eprintln!("configuration error: {e}");
                EXIT_CONFIG
            }
            Ok(cfg) => match helpdesk_server::serve(cfg).await {
                Ok(()) => 0,
                Err(ServeError::Config(e)) => {
                    eprintln!("configuration error: {e}");
                    EXIT_CONFIG
                }
                Err(e) => {
                    eprintln!("{e}");
                    EXIT_FAILURE
                }
            },
        },
        other => cli::run(other, &mut std::io::stdout()).await,
    };
    std::process::exit(code);
}
