//! `lancer`: ingest, train, index, evaluate and query the recommender.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration, 4 artifact produced under a different config, 5 workdir
//! locked. Failures print one line to stderr: `error[<category>]: <message>`.

mod commands;
mod workdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lancer_core::config::RunConfig;
use lancer_core::numerics::Precision;

use workdir::Workdir;

#[derive(Parser, Debug)]
#[command(name = "lancer", version, about = "Content-enriched sequential recommender")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Config file of `key = value` lines. Defaults to the workdir's
    /// config.txt when one exists.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory (defaults to $LANCER_WORKDIR).
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Accept artifacts produced under a different config hash.
    #[arg(long, global = true)]
    force: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, filter and split interactions; build the vocabulary.
    Ingest {
        #[arg(long)]
        interactions: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Stage one: learn the knowledge prompt on item content.
    TrainKnowledge,
    /// Stage two: learn the generator, domain memory and reasoning module.
    TrainReason,
    /// Pool the generator's token embeddings into the item index.
    BuildIndex,
    /// All-ranking leave-one-out evaluation; writes metrics.json.
    Evaluate {
        /// Also write per-user detail.tsv.
        #[arg(long)]
        detail: bool,
    },
    /// Recommend the next items for a comma-separated item id history.
    Recommend {
        #[arg(long, value_delimiter = ',', required = true)]
        user_history: Vec<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Dataset statistics: from explicit counts, the workdir, or the inputs.
    Stats {
        #[arg(long, requires_all = ["items", "interaction_count"])]
        users: Option<u64>,
        #[arg(long)]
        items: Option<u64>,
        #[arg(long = "interaction-count")]
        interaction_count: Option<u64>,
        #[arg(long)]
        interactions: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Gradient-check and beam-oracle suites.
    Selftest,
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error(transparent)]
    Core(#[from] lancer_core::Error),
    #[error(transparent)]
    Locked(#[from] workdir::Locked),
}

impl Failure {
    fn category(&self) -> &'static str {
        match self {
            Failure::Core(e) => e.category(),
            Failure::Locked(_) => "locked",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(lancer_core::Error::Config(_)) => 3,
            Failure::Core(lancer_core::Error::ConfigHash { .. }) => 4,
            Failure::Locked(_) => 5,
            Failure::Core(_) => 1,
        }
    }
}

type Outcome = Result<String, Failure>;

fn apply_flags(cfg: &mut RunConfig, g: &Global, cmd: &Command) -> lancer_core::Result<()> {
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| lancer_core::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(w) = &g.workdir {
        cfg.workdir = Some(w.clone());
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    match cmd {
        Command::Ingest { interactions, catalog } | Command::Stats { interactions, catalog, .. } => {
            if interactions.is_some() {
                cfg.interactions = interactions.clone();
            }
            if catalog.is_some() {
                cfg.catalog = catalog.clone();
            }
        }
        _ => {}
    }
    Ok(())
}

/// Config file (explicit, else the workdir's saved copy), then flags.
fn resolve_config(g: &Global, cmd: &Command) -> lancer_core::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).map_err(|e| lancer_core::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text, path)?;
    }
    apply_flags(&mut cfg, g, cmd)?;
    if cfg.workdir.is_none() {
        cfg.workdir = std::env::var_os("LANCER_WORKDIR").map(PathBuf::from);
    }
    if g.config.is_none() && !matches!(cmd, Command::Ingest { .. }) {
        if let Some(saved) = cfg.workdir.as_ref().map(|w| w.join(workdir::CONFIG)).filter(|p| p.exists()) {
            let workdir = cfg.workdir.clone();
            let text = std::fs::read_to_string(&saved).map_err(|e| lancer_core::Error::Io {
                path: saved.clone(),
                source: e,
            })?;
            cfg = RunConfig::default();
            cfg.apply_text(&text, &saved)?;
            apply_flags(&mut cfg, g, cmd)?;
            cfg.workdir = workdir;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn workdir(cfg: &RunConfig, force: bool) -> lancer_core::Result<Workdir> {
    let root = cfg.workdir.clone().ok_or_else(|| {
        lancer_core::Error::Config("no workdir: pass --workdir, set workdir in the config, or set LANCER_WORKDIR".into())
    })?;
    Ok(Workdir::new(root, force))
}

macro_rules! by_precision {
    ($cfg:expr, $f:ident ( $($arg:expr),* )) => {
        match $cfg.precision {
            Precision::F32 => commands::$f::<f32>($($arg),*),
            Precision::F64 => commands::$f::<f64>($($arg),*),
        }
    };
}

fn run(cli: &Cli) -> Outcome {
    let cfg = resolve_config(&cli.global, &cli.command)?;
    let force = cli.global.force;
    let out = match &cli.command {
        Command::Selftest => commands::selftest(cfg.seed)?,
        Command::Stats { users, items, interaction_count, .. } => {
            let counts = users.zip(*items).zip(*interaction_count).map(|((u, i), n)| (u, i, n));
            let dir = cfg.workdir.clone().map(|w| Workdir::new(w, force));
            commands::stats(&cfg, dir.as_ref(), counts)?
        }
        Command::Recommend { user_history, k } => {
            let dir = workdir(&cfg, force)?;
            by_precision!(cfg, recommend(&cfg, &dir, user_history, *k))?
        }
        cmd => {
            let dir = workdir(&cfg, force)?;
            let _lock = dir.lock()?;
            log::info!("workdir {}", dir.root().display());
            match cmd {
                Command::Ingest { .. } => commands::ingest(&cfg, &dir)?,
                Command::TrainKnowledge => by_precision!(cfg, train_knowledge(&cfg, &dir))?,
                Command::TrainReason => by_precision!(cfg, train_reason(&cfg, &dir))?,
                Command::BuildIndex => by_precision!(cfg, build_index(&cfg, &dir))?,
                Command::Evaluate { detail } => by_precision!(cfg, evaluate(&cfg, &dir, *detail))?,
                _ => unreachable!("handled above"),
            }
        }
    };
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {line}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
