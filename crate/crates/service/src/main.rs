use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use oncall_core::engine::{Engine, EngineConfig};
use oncall_core::fetch::FixtureFetcher;
use oncall_core::gateway::{BackendKind, Gateway};
use oncall_core::kb::{KnowledgeStore, SeedEntry};
use oncall_eval::ablate::{ablate, run_mode};
use oncall_eval::replay::replay;
use oncall_eval::report::{to_report_json, SYNTHETIC_NOTE};
use oncall_eval::scenario::{Mode, Scenario};
use oncall_eval::score::score_identification;
use oncall_eval::sweep::parse_thetas;
use oncall_eval::synth::{ablation_scenario, dedup_scenario};
use oncall_service::{server, App, ServiceConfig};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "oncall", version, about = "Proactive on-call support agent")]
struct Cli {
    /// TOML config file; ONCALL_SECTION__KEY variables override it.
    #[arg(long, global = true, env = "ONCALL_CONFIG")]
    config: Option<PathBuf>,
    /// Duplicate-answer threshold, overriding dedup.theta.
    #[arg(long, global = true)]
    theta: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP/WebSocket service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Replay a scenario directory through the engine and print predictions.
    Replay {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the audit log as JSON lines.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Inspect or move knowledge store contents.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Evaluation protocol over labeled scenarios.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
}

#[derive(Debug, Subcommand)]
enum KbCommand {
    /// Write live entries as a JSON seed list.
    Export {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add entries from a JSON seed list.
    Import {
        file: PathBuf,
    },
    Stats,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    NoAnswerReview,
    NoSelfImprove,
    All,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            Self::Full => vec![Mode::Full],
            Self::NoAnswerReview => vec![Mode::NoAnswerReview],
            Self::NoSelfImprove => vec![Mode::NoSelfImprove],
            Self::All => Mode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SynthKind {
    Ablation,
    Dedup,
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Scope identification metrics against gold labels.
    Identify(ReportArgs),
    /// Judged answer accuracy of sent cards.
    Answers {
        #[command(flatten)]
        args: ReportArgs,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
    },
    /// Dedup threshold sweep over one frozen answer stream.
    Sweep {
        #[command(flatten)]
        args: ReportArgs,
        #[arg(long, default_value = "0,0.2,0.4,0.6,0.7,0.8,0.9,1.0")]
        thetas: String,
    },
    /// Self-improvement ablation.
    Ablate {
        #[command(flatten)]
        args: ReportArgs,
        #[arg(long, value_enum, default_value = "all")]
        mode: ModeArg,
    },
    /// Generate a seeded synthetic scenario directory.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Sessions for dedup corpora, rounds for the ablation corpus.
        #[arg(long, default_value_t = 3)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ServiceConfig> {
    let mut cfg = ServiceConfig::from_env(cli.config.as_deref())?;
    if let Some(theta) = cli.theta {
        cfg.dedup.theta = theta;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn emit<T: Serialize>(table: &str, report: &T, out: Option<&Path>) -> Result<()> {
    print!("{table}");
    if let Some(path) = out {
        std::fs::write(path, to_report_json(report)).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("report written to {}", path.display());
    }
    Ok(())
}

fn open_store(cfg: &ServiceConfig, gateway: &Gateway) -> Result<KnowledgeStore> {
    let Some(dir) = &cfg.server.store_dir else {
        bail!("kb commands need server.store_dir (or ONCALL_SERVER__STORE_DIR)");
    };
    Ok(KnowledgeStore::open(dir, gateway.embedding_dim(), cfg.store.clone())?)
}

fn run_kb(cfg: &ServiceConfig, command: KbCommand) -> Result<()> {
    let gateway = Gateway::from_config(cfg.provider.clone())?;
    let store = open_store(cfg, &gateway)?;
    match command {
        KbCommand::Export { out } => {
            let entries: Vec<SeedEntry> = store.view().entries.values().map(SeedEntry::from).collect();
            let body = serde_json::to_string_pretty(&entries)? + "\n";
            match out {
                Some(p) => std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{body}"),
            }
        }
        KbCommand::Import { file } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let entries: Vec<SeedEntry> = serde_json::from_str(&text)?;
            let ids = store.import_entries(&gateway, &entries)?;
            store.persist()?;
            println!("imported {} entries", ids.len());
        }
        KbCommand::Stats => println!("{}", serde_json::to_string_pretty(&store.stats())?),
    }
    Ok(())
}

/// Scripted scenarios use their own rules; a remote provider in the config
/// replaces the scripted model but keeps the scenario seed and documents.
fn replay_engine(cfg: &ServiceConfig, scenario: &Scenario, engine_cfg: EngineConfig) -> Result<Engine> {
    if cfg.provider.backend == BackendKind::Scripted {
        return Ok(scenario.engine(engine_cfg, Mode::Full)?);
    }
    let gateway = Gateway::from_config(cfg.provider.clone())?;
    let store = scenario.seeded_store(&gateway)?;
    Ok(Engine::new(gateway, store, engine_cfg)?.with_fetcher(Arc::new(FixtureFetcher::new(scenario.documents.clone()))))
}

fn run_eval(cfg: &ServiceConfig, command: EvalCommand) -> Result<()> {
    let engine_cfg = EngineConfig { review_inline: true, ..cfg.engine_config() };
    let load = |args: &ReportArgs| Scenario::load(&args.scenario).with_context(|| format!("loading {}", args.scenario.display()));
    match command {
        EvalCommand::Identify(args) => {
            let s = load(&args)?;
            let preds = replay(&s.engine(engine_cfg, Mode::Full)?, &s.corpus)?;
            let report = score_identification(&preds, &s.corpus)?;
            emit(&report.table(), &report, args.out.as_deref())
        }
        EvalCommand::Answers { args, mode } => {
            let s = load(&args)?;
            let [mode] = mode.modes()[..] else {
                bail!("answers takes a single mode");
            };
            let (_, judged) = run_mode(&s, &engine_cfg, mode)?;
            emit(&judged.table(), &judged, args.out.as_deref())
        }
        EvalCommand::Sweep { args, thetas } => {
            let s = load(&args)?;
            let thetas = parse_thetas(&thetas).map_err(anyhow::Error::msg)?;
            let report = oncall_eval::sweep_scenario(&s, &engine_cfg, &thetas)?;
            eprintln!("{SYNTHETIC_NOTE}");
            emit(&report.table(), &report.rounded(), args.out.as_deref())
        }
        EvalCommand::Ablate { args, mode } => {
            let s = load(&args)?;
            let report = ablate(&s, &engine_cfg, &mode.modes())?;
            emit(&report.table(), &report, args.out.as_deref())
        }
        EvalCommand::Synth { kind, seed, size, out } => {
            let s = match kind {
                SynthKind::Ablation => ablation_scenario(seed, size),
                SynthKind::Dedup => dedup_scenario(seed, size),
            };
            s.save(&out)?;
            println!("wrote {} sessions to {}", s.corpus.sessions.len(), out.display());
            Ok(())
        }
    }
}

fn run_replay(cfg: &ServiceConfig, scenario: &Path, out: Option<PathBuf>, audit: Option<PathBuf>) -> Result<()> {
    let s = Scenario::load(scenario).with_context(|| format!("loading {}", scenario.display()))?;
    let mut engine = replay_engine(cfg, &s, EngineConfig { review_inline: true, ..cfg.engine_config() })?;
    if let Some(path) = &audit {
        engine = engine.with_audit_file(path).with_context(|| format!("opening {}", path.display()))?;
    }
    let preds = replay(&engine, &s.corpus)?;
    match out {
        Some(p) => std::fs::write(&p, preds.to_json()).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{}", preds.to_json()),
    }
    Ok(())
}

fn run_serve(mut cfg: ServiceConfig, listen: Option<String>) -> Result<()> {
    if let Some(l) = listen {
        cfg.server.listen = l;
        cfg.validate()?;
    }
    // blocking clients must exist before the runtime starts
    let app = Arc::new(App::build(cfg)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = server::bind(&app).await?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        server::serve(app.clone(), listener, shutdown).await
    })?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("ONCALL_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Serve { listen } => run_serve(cfg, listen),
        Command::Replay { scenario, out, audit } => run_replay(&cfg, &scenario, out, audit),
        Command::Kb { command } => run_kb(&cfg, command),
        Command::Eval { command } => run_eval(&cfg, command),
    }
}
