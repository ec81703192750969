use std::io::Write;

use clap::{Parser, Subcommand};
use helpdesk_client::{ChatEvent, ClientError, HelpdeskClient};

#[derive(Debug, Parser)]
#[command(name = "helpdesk-client", version, about = "Talk to a running help desk service")]
struct Cli {
    /// Service base URL.
    #[arg(long, env = "HELPDESK_URL", default_value = "http://127.0.0.1:8080")]
    url: String,
    /// Bearer token for admin endpoints.
    #[arg(long, env = "HELPDESK_ADMIN_TOKEN")]
    admin_token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print service health.
    Health,
    /// Ask a question in a new thread and stream the answer.
    Ask {
        question: String,
        /// Continue an existing thread (needs --session).
        #[arg(long, requires = "session")]
        thread: Option<String>,
        #[arg(long)]
        session: Option<String>,
    },
    /// Rate the latest answer in a thread (1-5).
    Feedback {
        thread: String,
        rating: i64,
        #[arg(long)]
        comment: Option<String>,
    },
    /// Download feedback CSV (admin).
    Export {
        #[arg(long)]
        since: Option<String>,
        #[arg(long)]
        until: Option<String>,
    },
    /// Trigger an index rebuild on the server (admin).
    Ingest {
        #[arg(long)]
        force: bool,
        #[arg(long)]
        dry_run: bool,
    },
    /// Reload the policy file on the server (admin).
    ReloadPolicy,
}

#[tokio::main]
async fn main() {
    let cli = Cli::parse();
    let mut client = HelpdeskClient::new(cli.url);
    if let Some(t) = cli.admin_token {
        client = client.with_admin_token(t);
    }
    match run(&client, cli.command).await {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    }
}

async fn run(client: &HelpdeskClient, command: Command) -> Result<i32, ClientError> {
    let mut out = std::io::stdout();
    match command {
        Command::Health => {
            let h = client.health().await?;
            println!("{} {}", h.status, h.detail);
            Ok(if h.status == "ok" { 0 } else { 1 })
        }
        Command::Ask {
            question,
            thread,
            session,
        } => {
            let (session, thread) = match (session, thread) {
                (Some(s), Some(t)) => (s, t),
                (session, _) => {
                    let s = match session {
                        Some(s) => s,
                        None => client.create_session().await?,
                    };
                    let t = client.create_thread(&s).await?;
                    (s, t)
                }
            };
            eprintln!("session {session} thread {thread}");
            let mut stream = client.chat(&session, &thread, &question).await?;
            let mut shown = 0;
            while let Some(ev) = stream.next_event().await? {
                match ev {
                    ChatEvent::Message(text) => {
                        // frames carry the full text so far
                        let _ = write!(out, "{}", text.get(shown..).unwrap_or(""));
                        let _ = out.flush();
                        shown = text.len();
                    }
                    ChatEvent::Done(done) => {
                        let _ = writeln!(out, "{}", done.answer.get(shown..).unwrap_or(""));
                        for c in &done.citations {
                            let _ = writeln!(out, "  source: {} ({})", c.source_title, c.doc_id);
                        }
                        return Ok(0);
                    }
                    ChatEvent::Error(f) => {
                        let _ = writeln!(out);
                        eprintln!("answer failed ({}): {}", f.kind, f.message);
                        return Ok(1);
                    }
                }
            }
            eprintln!("stream ended early");
            Ok(1)
        }
        Command::Feedback {
            thread,
            rating,
            comment,
        } => {
            let r = client.feedback(&thread, rating, comment.as_deref()).await?;
            println!("recorded {} ({} stars)", r.feedback_id, r.star_rating);
            Ok(0)
        }
        Command::Export { since, until } => {
            let csv = client.export_feedback(since.as_deref(), until.as_deref()).await?;
            let _ = out.write_all(csv.as_bytes());
            Ok(0)
        }
        Command::Ingest { force, dry_run } => {
            let v = client.ingest(force, dry_run).await?;
            println!("{}", v.get("summary").and_then(|s| s.as_str()).unwrap_or_default());
            Ok(0)
        }
        Command::ReloadPolicy => {
            let v = client.reload_policy().await?;
            println!("{v}");
            Ok(0)
        }
    }
}
