use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use seals_cli::commands::{cmd_analyze_graph, cmd_run, cmd_synth, cmd_theory, TheoryParams, DATA_DIR_ENV};
use seals_cli::service::{router, serve, AppState};
use seals_cli::{CliError, Inputs};
use seals_core::synthetic::SyntheticSpec;
use seals_core::theory::Variant;

#[derive(Parser)]
#[command(name = "seals", version, about = "Nearest-neighbor restricted active learning and search")]
struct Cli {
    /// Dataset root for relative manifest paths not found next to the config.
    #[arg(long, env = DATA_DIR_ENV, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    NnGraph,
    ProjectAnywhere,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (experiment, concept, repetition) cell of a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Where finished cells are kept; defaults to <out>/checkpoints.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the k-NN graph structure of each concept's positives.
    AnalyzeGraph {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Simulate the chain process and write its trace as CSV.
    Theory {
        /// JSON parameters; flags override individual fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trace file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        max_rounds: Option<usize>,
    },
    /// Serve the labeling API, one session per configured concept.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Session checkpoints are written here and resumed from here.
        #[arg(long, default_value = "session")]
        out: PathBuf,
    },
    /// Generate a synthetic corpus and save it with a manifest.
    Synth {
        /// JSON generator settings; defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Independent draw index; 0 is the unlabeled pool.
        #[arg(long, default_value_t = 0)]
        split: u64,
        #[arg(long, default_value = "manifest")]
        stem: String,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, checkpoint } => {
            let inputs = Inputs::load(&config, cli.data_dir)?;
            let report = cmd_run(&inputs, &out, checkpoint.as_deref())?;
            for (name, row) in &report.summary {
                let s = &row.summary;
                println!(
                    "{name:<20} mAP {:.4} ± {:.4}  recall {:.4} ± {:.4}  pool {:.4}",
                    s.map_mean, s.map_std, s.recall_mean, s.recall_std, s.pool_frac_mean
                );
            }
        }
        Command::AnalyzeGraph { config, out } => {
            let inputs = Inputs::load(&config, cli.data_dir)?;
            let rows = cmd_analyze_graph(&inputs, &out)?;
            println!("{} concepts written to {}", rows.len(), out.join("structure.csv").display());
        }
        Command::Theory {
            config,
            out,
            d,
            gamma,
            delta,
            epsilon,
            variant,
            max_rounds,
        } => {
            let mut p = match config {
                Some(path) => TheoryParams::load(&path)?,
                None => TheoryParams::default(),
            };
            p.d = d.unwrap_or(p.d);
            p.gamma = gamma.unwrap_or(p.gamma);
            p.delta = delta.unwrap_or(p.delta);
            p.epsilon = epsilon.unwrap_or(p.epsilon);
            p.max_rounds = max_rounds.unwrap_or(p.max_rounds);
            match variant {
                Some(VariantArg::NnGraph) => p.variant = Variant::NnGraph,
                Some(VariantArg::ProjectAnywhere) => p.variant = Variant::ProjectAnywhere,
                None => {}
            }
            let trace = match &out {
                Some(path) => {
                    let file = std::fs::File::create(path).map_err(|source| CliError::Io {
                        path: path.clone(),
                        source,
                    })?;
                    cmd_theory(&p, std::io::BufWriter::new(file))?
                }
                None => cmd_theory(&p, std::io::stdout().lock())?,
            };
            let mut err = std::io::stderr().lock();
            let _ = writeln!(err, "converged: {}  queries: {}", trace.converged, trace.queries);
        }
        Command::Serve { config, port, host, out } => {
            let inputs = Inputs::load(&config, cli.data_dir)?;
            let static_dir = inputs.config.serve.static_dir.as_deref().map(|d| inputs.resolve(d));
            let state = AppState::new(&inputs, &out)?;
            let app = router(state, static_dir.as_deref());
            let rt = tokio::runtime::Runtime::new().map_err(|source| CliError::Io {
                path: PathBuf::from("<runtime>"),
                source,
            })?;
            rt.block_on(async move {
                let addr = format!("{host}:{port}");
                let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|source| CliError::Io {
                    path: PathBuf::from(&addr),
                    source,
                })?;
                log::info!("listening on http://{addr}");
                serve(listener, app, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
                .map_err(|source| CliError::Io {
                    path: PathBuf::from(addr),
                    source,
                })
            })?;
        }
        Command::Synth { config, out, split, stem } => {
            let spec: SyntheticSpec = match config {
                Some(path) => read_json(&path)?,
                None => SyntheticSpec::default(),
            };
            let manifest = cmd_synth(&spec, split, &out, &stem)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
