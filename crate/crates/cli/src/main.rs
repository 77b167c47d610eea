//! `bubblerag` command line. Every command is a request to the HTTP service;
//! without `--server` an in-process instance on a loopback port handles it.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bubblerag_client::{Client, ClientError};
use bubblerag_core::api::{
    ErrorKind, EvalRequest, IndexRequest, OracleRequest, QueryRequest, SynthRequest,
};
use bubblerag_core::config::RunConfig;
use bubblerag_core::eval::SuiteSpec;
use bubblerag_core::oracle::OracleInstance;
use bubblerag_core::pipeline::OutputFlags;
use bubblerag_core::reasoner::ReasonerConfig;
use bubblerag_core::synth::SyntheticSpec;
use bubblerag_core::wire::WireConfig;
use clap::{Args, Parser, Subcommand};
use tokio::net::TcpListener;

#[derive(Parser)]
#[command(
    name = "bubblerag",
    version,
    about = "Evidence-subgraph retrieval over knowledge graphs"
)]
struct Cli {
    /// Base URL of a running service. An embedded one is started when unset.
    #[arg(long, env = "BUBBLERAG_SERVER", global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate JSONL inputs and write a bundle with a manifest.
    Index {
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Expected embedding dimension; inferred from the nodes when unset.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Answer a question over a bundle.
    Query(QueryArgs),
    /// Generate a synthetic bundle with a planted evidence path.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an evaluation suite and write the JSON report.
    Eval {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the suite's worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Solve a small instance exactly.
    Oracle {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        n_max: Option<usize>,
    },
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Run configuration; defaults to `<bundle>/config.json` when present.
    #[arg(long)]
    config: Option<PathBuf>,
    query: String,
    #[arg(long)]
    dump_cegs: bool,
    #[arg(long)]
    explain: bool,
    #[arg(long)]
    emit_context: bool,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    hops: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reasoner endpoint (`tcp://host:port` or `exec:cmd args`); replaces the
    /// configured reasoner.
    #[arg(long, env = "BUBBLERAG_REASONER")]
    reasoner: Option<String>,
}

#[derive(Debug)]
struct Failure {
    message: String,
    code: u8,
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let code = match &e {
            ClientError::Api { error, .. } if error.kind == ErrorKind::NoAnchors => 2,
            _ => 1,
        };
        Self {
            message: e.to_string(),
            code,
        }
    }
}

fn fail(message: impl ToString) -> Failure {
    Failure {
        message: message.to_string(),
        code: 1,
    }
}

fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    std::path::absolute(p).map_err(|e| fail(format!("{}: {e}", p.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializes"));
}

fn query_config(args: &QueryArgs, bundle: &Path) -> Result<RunConfig, Failure> {
    let path = match &args.config {
        Some(p) => Some(absolute(p)?),
        None => Some(bundle.join("config.json")).filter(|p| p.is_file()),
    };
    let mut config = match path {
        Some(p) => RunConfig::load(&p).map_err(fail)?,
        None => RunConfig::default(),
    };
    if let Some(x) = args.budget {
        config.budget = x;
    }
    if let Some(x) = args.hops {
        config.hops = x;
    }
    if let Some(x) = args.depth {
        config.depth = x;
    }
    if let Some(x) = args.alpha {
        config.alpha = x;
    }
    if let Some(x) = args.top_n {
        config.top_n = x;
    }
    if let Some(x) = args.seed {
        config.seed = x;
    }
    if let Some(endpoint) = &args.reasoner {
        config.reasoner = ReasonerConfig::External(WireConfig::new(endpoint.clone()));
    }
    config.validate().map_err(fail)?;
    Ok(config)
}

async fn embedded() -> Result<Client, Failure> {
    let listener = TcpListener::bind("127.0.0.1:0")
        .await
        .map_err(|e| fail(format!("cannot start embedded service: {e}")))?;
    let addr = listener.local_addr().map_err(fail)?;
    tokio::spawn(bubblerag_server::serve(listener, std::future::pending()));
    Ok(Client::new(format!("http://{addr}")))
}

async fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Serve { addr } = &cli.command {
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|e| fail(format!("{addr}: {e}")))?;
        eprintln!(
            "listening on http://{}",
            listener.local_addr().map_err(fail)?
        );
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        return bubblerag_server::serve(listener, shutdown)
            .await
            .map_err(fail);
    }
    let client = match &cli.server {
        Some(url) => Client::new(url.clone()),
        None => embedded().await?,
    };
    match cli.command {
        Command::Index {
            nodes,
            edges,
            chunks,
            out,
            dim,
        } => {
            let req = IndexRequest {
                nodes: absolute(&nodes)?,
                edges: absolute(&edges)?,
                chunks: absolute(&chunks)?,
                out: absolute(&out)?,
                dim,
            };
            print_json(&client.index(&req).await?);
        }
        Command::Query(args) => {
            let bundle = absolute(&args.bundle)?;
            let req = QueryRequest {
                config: query_config(&args, &bundle)?,
                bundle,
                query: args.query.clone(),
                flags: OutputFlags {
                    dump_cegs: args.dump_cegs,
                    explain: args.explain,
                    emit_context: args.emit_context,
                },
            };
            print!("{}", client.query(&req).await?.output);
        }
        Command::Synth { spec, out } => {
            let spec: SyntheticSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SyntheticSpec::default(),
            };
            let req = SynthRequest {
                spec,
                out: absolute(&out)?,
            };
            print_json(&client.synth(&req).await?.manifest);
        }
        Command::Eval {
            suite,
            out,
            workers,
        } => {
            let text = std::fs::read_to_string(&suite)
                .map_err(|e| fail(format!("{}: {e}", suite.display())))?;
            let mut spec = SuiteSpec::from_json(&text)
                .map_err(|e| fail(format!("{}: {e}", suite.display())))?;
            if let Some(w) = workers {
                spec.workers = w;
            }
            let req = EvalRequest {
                suite: spec,
                out: Some(absolute(&out)?),
            };
            print_json(&client.eval(&req).await?.aggregates);
        }
        Command::Oracle { instance, n_max } => {
            let instance: OracleInstance = read_json(&instance)?;
            print_json(&client.oracle(&OracleRequest { instance, n_max }).await?);
        }
        Command::Serve { .. } => unreachable!("handled above"),
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
