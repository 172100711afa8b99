//! Command-line front end. Every subcommand works on the same run
//! directories as the HTTP API.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cbdebug_core::cbm::TrainConfig;
use cbdebug_core::feedback::FeedbackSource;
use cbdebug_core::retrain::StrategyConfig;
use cbdebug_core::synthdata::DatasetConfig;
use cbdebug_core::eval::background_fraction;

use crate::api::{self, AppState};
use crate::error::{Result, ServiceError};
use crate::jobs::{self, FeedbackRequest, ModelChoice};
use crate::store::RunStore;

/// Remembers the run created last, so the run argument can be left out.
const CURRENT_FILE: &str = ".current";

#[derive(Debug, Parser)]
#[command(name = "cbdebug", version, about = "Concept-bottleneck debugging workbench")]
pub struct Cli {
    /// Directory holding the runs [default: $CBDEBUG_RUNS_DIR or ./runs]
    #[arg(long, global = true)]
    pub runs_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArg {
    /// Run id [default: the run created last]
    pub run: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Oracle {
    Rule,
    Llm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Before,
    After,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted dataset and create a run
    Gen {
        #[arg(long, default_value = "waterbirds", conflicts_with = "config")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset configuration file (JSON) instead of a preset
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run id [default: generated]
        #[arg(long)]
        run: Option<String>,
    },
    /// Train the original model
    Train {
        #[command(flatten)]
        run: RunArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Keep the extractor fixed at initialization
        #[arg(long)]
        freeze_extractor: bool,
        /// Training configuration file (JSON)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Show concepts with their head weights and top exemplars
    Explain {
        #[command(flatten)]
        run: RunArg,
        #[arg(long, value_enum, default_value = "before")]
        model: ModelArg,
        /// Exemplars per concept
        #[arg(long, default_value_t = jobs::DEFAULT_EXEMPLARS)]
        top: usize,
        #[arg(long)]
        json: bool,
    },
    /// Mark spurious concepts, interactively or with an oracle
    Debug {
        #[command(flatten)]
        run: RunArg,
        #[arg(long, value_enum, conflicts_with = "mark")]
        oracle: Option<Oracle>,
        /// Comma-separated concept ids to mark
        #[arg(long, value_delimiter = ',')]
        mark: Option<Vec<usize>>,
        /// Rule oracle threshold on the background attribution share
        #[arg(long)]
        threshold: Option<f64>,
        /// Task description used by the LLM oracle [default: the run's preset]
        #[arg(long)]
        task: Option<String>,
    },
    /// Retrain with a strategy
    Retrain {
        #[command(flatten)]
        run: RunArg,
        /// remove, retrain, protopdebug, reweight_only, augment_only, cbdebug, jtt or lff
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON file merged over the strategy defaults
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate the run's models and write metrics.json
    Eval {
        #[command(flatten)]
        run: RunArg,
    },
    /// Compare average and worst-group accuracy across runs
    Compare {
        #[arg(required = true)]
        runs: Vec<String>,
        #[arg(long)]
        csv: bool,
    },
    /// Show a run's status
    Status {
        #[command(flatten)]
        run: RunArg,
    },
    /// List runs
    List,
    /// Histogram of the learned sample weights
    Weights {
        #[command(flatten)]
        run: RunArg,
        #[arg(long, default_value_t = jobs::HISTOGRAM_BINS)]
        bins: usize,
        #[arg(long)]
        csv: bool,
    },
    /// Serve the HTTP API
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Port [default: $CBDEBUG_PORT or 8080]
        #[arg(long)]
        port: Option<u16>,
        /// Concurrent jobs across runs
        #[arg(long)]
        workers: Option<usize>,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ServiceError::validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ServiceError::validation(format!("{}: {e}", path.display())))
}

fn read_json_value(path: &PathBuf) -> Result<serde_json::Value> {
    read_json(path)
}

fn resolve(store: &RunStore, arg: &RunArg) -> Result<String> {
    if let Some(r) = &arg.run {
        return Ok(r.clone());
    }
    std::fs::read_to_string(store.root().join(CURRENT_FILE))
        .map(|s| s.trim().to_string())
        .map_err(|_| ServiceError::validation("no run given and no current run; run gen first"))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| ServiceError::Runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let store = match &cli.runs_dir {
        Some(dir) => RunStore::open(dir)?,
        None => RunStore::from_env()?,
    };
    match cli.command {
        Command::Gen {
            preset,
            seed,
            config,
            run,
        } => {
            let record = match config {
                Some(path) => {
                    let cfg: DatasetConfig = read_json(&path)?;
                    jobs::create_run(&store, run, None, Some(cfg), seed)?
                }
                None => jobs::create_run(&store, run, Some(&preset), None, seed)?,
            };
            std::fs::write(store.root().join(CURRENT_FILE), &record.run_id)
                .map_err(|e| ServiceError::Runtime(e.to_string()))?;
            println!("{}", record.run_id);
        }
        Command::Train {
            run,
            epochs,
            seed,
            freeze_extractor,
            config,
        } => {
            let id = resolve(&store, &run)?;
            let record = store.load(&id)?;
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig {
                    seed: record.dataset_config.seed,
                    ..TrainConfig::default()
                },
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.freeze_extractor |= freeze_extractor;
            let record = jobs::train_run(&store, &id, cfg)?;
            println!("{}", record.message);
        }
        Command::Explain { run, model, top, json } => {
            let id = resolve(&store, &run)?;
            let which = match model {
                ModelArg::Before => ModelChoice::Before,
                ModelArg::After => ModelChoice::After,
            };
            let views = jobs::concept_views(&store, &id, which, top)?;
            if json {
                print_json(&views)?;
            } else {
                for v in &views {
                    let weights: Vec<String> = v.head_weights.iter().map(|w| format!("{w:+.3}")).collect();
                    println!(
                        "[{:>2}] {}{}  weights [{}]",
                        v.concept_id,
                        v.name,
                        if v.active { "" } else { " (removed)" },
                        weights.join(", ")
                    );
                    for e in v.top_exemplars.iter().take(3) {
                        let attr: Vec<String> = e.segment_attribution.iter().map(|a| format!("{a:+.2}")).collect();
                        println!("      sample {:>5}  act {:.3}  segments [{}]", e.sample_id, e.activation, attr.join(" "));
                    }
                }
            }
        }
        Command::Debug {
            run,
            oracle,
            mark,
            threshold,
            task,
        } => {
            let id = resolve(&store, &run)?;
            let req = match (oracle, mark) {
                (Some(o), _) => FeedbackRequest {
                    threshold,
                    task,
                    ..FeedbackRequest::oracle(match o {
                        Oracle::Rule => FeedbackSource::RuleOracle,
                        Oracle::Llm => FeedbackSource::LlmOracle,
                    })
                },
                (None, Some(ids)) => FeedbackRequest::human(ids),
                (None, None) => FeedbackRequest::human(interactive_marking(&store, &id)?),
            };
            let fb = jobs::record_feedback(&store, &id, &req)?;
            let ids: Vec<String> = fb.c_spur.iter().map(|c| c.to_string()).collect();
            println!("marked spurious: [{}]", ids.join(", "));
            let abstained = fb.abstained();
            if !abstained.is_empty() {
                println!("abstained: {abstained:?}");
            }
            for w in &fb.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Retrain {
            run,
            strategy,
            epochs,
            seed,
            config,
        } => {
            let id = resolve(&store, &run)?;
            let mut overrides = match &config {
                Some(p) => read_json_value(p)?,
                None => serde_json::json!({}),
            };
            if let Some(e) = epochs {
                overrides["retrain_epochs"] = e.into();
            }
            if let Some(s) = seed {
                overrides["seed"] = s.into();
            }
            let cfg: StrategyConfig = api::strategy_config(&strategy, Some(overrides))?;
            let record = jobs::retrain_run(&store, &id, cfg)?;
            println!("{}", record.message);
        }
        Command::Eval { run } => {
            let id = resolve(&store, &run)?;
            let m = jobs::evaluate_run(&store, &id)?;
            for (stage, gm) in std::iter::once(("before", &m.before)).chain(m.after.as_ref().map(|a| ("after", a))) {
                println!(
                    "{stage}: average {:.4}  group mean {:.4}  worst group {:.4}",
                    gm.sample_average, gm.group_mean, gm.worst_group
                );
                for g in &gm.groups {
                    println!("  y={} a={}  {}/{}  {:.4}", g.y, g.a, g.correct, g.n, g.accuracy);
                }
            }
        }
        Command::Compare { runs, csv } => {
            print!("{}", jobs::compare(&store, &runs, csv)?);
        }
        Command::Status { run } => {
            let id = resolve(&store, &run)?;
            let s = jobs::status(&store, &id)?;
            println!("{}  {:.0}%  {}", s.status, s.progress * 100.0, s.message);
        }
        Command::List => {
            for r in store.list()? {
                println!("{}  {}  {}", r.run_id, r.status, r.message);
            }
        }
        Command::Weights { run, bins, csv } => {
            let id = resolve(&store, &run)?;
            if bins == 0 {
                return Err(ServiceError::validation("bins must be at least 1"));
            }
            let h = jobs::weights_histogram(&store, &id, bins)?;
            print!("{}", if csv { h.to_csv() } else { h.to_text(50) });
        }
        Command::Serve { host, port, workers } => {
            let port = match port {
                Some(p) => p,
                None => match std::env::var("CBDEBUG_PORT") {
                    Ok(p) => p
                        .parse()
                        .map_err(|_| ServiceError::validation(format!("CBDEBUG_PORT: invalid port {p:?}")))?,
                    Err(_) => 8080,
                },
            };
            let workers = workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(2, |n| n.get()).min(4));
            let rt = tokio::runtime::Runtime::new().map_err(|e| ServiceError::Runtime(e.to_string()))?;
            rt.block_on(api::serve(SocketAddr::new(host, port), AppState::new(store, workers)))?;
        }
    }
    Ok(())
}

/// Lists the concepts and reads the ids to mark from stdin.
fn interactive_marking(store: &RunStore, id: &str) -> Result<Vec<usize>> {
    let model = store.model_before(id)?;
    let ds = store.dataset(id)?;
    let views = jobs::concept_views(store, id, ModelChoice::Before, jobs::DEFAULT_EXEMPLARS)?;
    let mut out = std::io::stderr();
    for v in &views {
        let bg = background_fraction(&model, v.concept_id, &ds.segment_roles);
        let _ = writeln!(out, "[{:>2}] {}  (background fraction {:.2})", v.concept_id, v.name, bg);
    }
    let _ = write!(out, "spurious concept ids (comma or space separated, empty for none): ");
    let _ = out.flush();
    let mut line = String::new();
    std::io::stdin()
        .lock()
        .read_line(&mut line)
        .map_err(|e| ServiceError::Runtime(e.to_string()))?;
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| ServiceError::validation(format!("not a concept id: {t:?}")))
        })
        .collect()
}
