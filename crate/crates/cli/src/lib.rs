//! Command-line pipeline: ingestion, baselines, indexing, epoch generation,
//! fine-tuning and evaluation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use linklab::trainer::TrainConfig;

mod commands;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] linklab::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 3 for numeric failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(linklab::Error::Numeric(_)) => 3,
            _ => 2,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "linklab", version, about = "Multilingual entity disambiguation toolkit")]
pub struct Cli {
    /// Seed for every random choice; overrides the config value.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Flat `key = value` training config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root for relative paths.
    #[arg(long, env = "LINKLAB_DATA_DIR", global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a KB dump and extract its link mentions into an entity and a mention store.
    Ingest(IngestArgs),
    /// Build an alias table from mention stores.
    Table(TableArgs),
    /// Link mention strings with an alias table.
    Link(LinkArgs),
    /// Evaluate an alias, string-similarity or dense alias baseline.
    Baseline(BaselineArgs),
    /// Embed entity descriptions with a checkpoint.
    EmbedKb(EmbedKbArgs),
    /// Compare partitioned search against exact search.
    Index(IndexArgs),
    /// Generate one round's training epoch without training.
    Epoch(EpochArgs),
    /// Fine-tune the encoder round by round.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Coverage bounds of a KB for an evaluation set.
    Bound(BoundArgs),
    /// Write the synthetic toyland corpus.
    Toyland(ToylandArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub kb: PathBuf,
    /// Extra link-bearing documents; mentions are also taken from the KB file.
    #[arg(long)]
    pub docs: Vec<PathBuf>,
    #[arg(long)]
    pub language: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    #[arg(long, required = true)]
    pub mentions: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub uncased: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub uncased: bool,
    /// Fall back to the nearest aliases by normalized Indel distance.
    #[arg(long)]
    pub string: bool,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(required = true)]
    pub mentions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMode {
    Alias,
    String,
    Dense,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub mode: BaselineMode,
    /// Alias table (alias and string modes).
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub uncased: bool,
    /// Evaluation mentions (alias and string modes).
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Alias embeddings labeled by entity (dense mode).
    #[arg(long)]
    pub alias_embeddings: Option<PathBuf>,
    /// Mention embeddings labeled by gold entity (dense mode).
    #[arg(long)]
    pub mention_embeddings: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedKbArgs {
    #[arg(long)]
    pub entities: PathBuf,
    /// Encoder checkpoint; a freshly seeded encoder when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub partitions: usize,
    #[arg(long, default_value_t = 1)]
    pub probes: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EpochArgs {
    #[arg(long)]
    pub entities: PathBuf,
    #[arg(long)]
    pub train_mentions: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub round: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub entities: PathBuf,
    #[arg(long)]
    pub train_mentions: PathBuf,
    #[arg(long)]
    pub eval_mentions: PathBuf,
    #[arg(long, default_value = "descriptions")]
    pub kb_mode: String,
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    pub ks: Vec<usize>,
    /// Do not keep the epoch files.
    #[arg(long)]
    pub no_epochs: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub entities: PathBuf,
    #[arg(long)]
    pub eval_mentions: PathBuf,
    /// Needed for the contexts and both modes.
    #[arg(long)]
    pub train_mentions: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "descriptions")]
    pub kb_mode: String,
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[arg(long)]
    pub entities: PathBuf,
    #[arg(long)]
    pub eval_mentions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToylandArgs {
    #[arg(long, default_value_t = 200)]
    pub entities: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub started: f64,
    pub finished: f64,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Resolved global options shared by the commands.
pub struct Context {
    pub config: TrainConfig,
    /// Seed given on the command line, if any.
    pub seed: Option<u64>,
    data_dir: Option<PathBuf>,
    started: f64,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> CliResult<Self> {
        let mut config = TrainConfig::default();
        if let Some(path) = &cli.config {
            let path = resolve(cli.data_dir.as_deref(), path);
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            config.apply_text(&text)?;
        }
        for o in &cli.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
            config.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(Context {
            config,
            seed: cli.seed,
            data_dir: cli.data_dir.clone(),
            started: now(),
        })
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        resolve(self.data_dir.as_deref(), p)
    }

    pub fn manifest(&self, command: &str, inputs: &[&Path], outputs: &[&Path]) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config: self
                .config
                .entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            seed: self.config.seed,
            started: self.started,
            finished: now(),
        }
    }

    /// Writes the manifest into `dir`, or next to `file` as `<file>.manifest.json`.
    pub fn write_manifest(&self, at: &Path, manifest: &RunManifest) -> CliResult<()> {
        let path = if at.is_dir() {
            at.join("manifest.json")
        } else {
            let mut name = at.as_os_str().to_owned();
            name.push(".manifest.json");
            PathBuf::from(name)
        };
        write_atomic(&path, |w| {
            serde_json::to_writer_pretty(&mut *w, manifest)?;
            writeln!(w).map_err(|e| CliError::io(&path, e))
        })
    }
}

fn resolve(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(root) if p.is_relative() => root.join(p),
        _ => p.to_path_buf(),
    }
}

/// Writes through a temporary sibling and renames, so readers never see partial files.
pub fn write_atomic<F>(path: &Path, fill: F) -> CliResult<()>
where
    F: FnOnce(&mut BufWriter<File>) -> CliResult<()>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    let result = fill(&mut w).and_then(|_| w.flush().map_err(|e| CliError::io(&tmp, e)));
    drop(w);
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let ctx = Context::from_cli(&cli)?;
    match &cli.command {
        Command::Ingest(a) => commands::ingest(&ctx, a),
        Command::Table(a) => commands::table(&ctx, a),
        Command::Link(a) => commands::link(&ctx, a),
        Command::Baseline(a) => commands::baseline(&ctx, a),
        Command::EmbedKb(a) => commands::embed_kb(&ctx, a),
        Command::Index(a) => commands::index(&ctx, a),
        Command::Epoch(a) => commands::epoch(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Bound(a) => commands::bound(&ctx, a),
        Command::Toyland(a) => commands::toyland(&ctx, a),
    }
}
