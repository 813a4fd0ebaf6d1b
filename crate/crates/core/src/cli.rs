//! Command implementations behind the `parapath` binary.
//!
//! Every command writes its report to the given writer and returns a typed
//! [`Error`]; [`main_entry`] turns that into a single-line `error[...]`
//! message on stderr and the exit code from [`Error::exit_code`].

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{analyze, generate, SampleMode};
use crate::checkpoint::Checkpoint;
use crate::composer::{compose, provenance_manifest, CompositionPlan, PathSource};
use crate::config::{presets, ModelConfig, RunConfig, TrainConfig};
use crate::data::synth::{desk_corpora, desk_prompts, desk_tokenizer};
use crate::data::{pretokenize, ChunkStore, Corpus, Domain, Role, ToyTokenizer};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::RngState;
use crate::trainer::Trainer;

pub const SEED_ENV: &str = "PAPA_SEED";

#[derive(Debug, Parser)]
#[command(name = "parapath", version, about = "Parallel-path transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize corpora into two-epoch 60/40 chunk stores.
    Pretokenize(PretokenizeArgs),
    /// Train a model for one data role.
    Train(TrainArgs),
    /// Build a composite model from pretrained path checkpoints.
    Compose(ComposeArgs),
    /// Trace path selection over a prompt set.
    Analyze(AnalyzeArgs),
    /// Continue a prompt and report next-token probabilities.
    Generate(GenerateArgs),
    /// Itemized parameter count of a config.
    CountParams(CountArgs),
    /// Print a checkpoint manifest.
    InspectCheckpoint(InspectArgs),
}

/// A model config from a TOML file or a named preset.
#[derive(Debug, Args, Clone)]
pub struct ConfigSource {
    /// TOML run config with `[model]` and optional `[train]` tables.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named preset (see `count-params --list`).
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the vocabulary size.
    #[arg(long)]
    pub vocab: Option<usize>,
}

impl ConfigSource {
    /// Model and train config; presets come with desk-scale train defaults.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut run = match (&self.config, &self.preset) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(name)) => RunConfig {
                model: presets::by_name(name)
                    .ok_or_else(|| Error::Config {
                        field: "preset".into(),
                        reason: format!("unknown preset {name:?}; known: {}", presets::NAMES.join(", ")),
                    })?,
                train: presets::desk_train(),
            },
            (None, None) => {
                return Err(Error::Config {
                    field: "config".into(),
                    reason: "pass --config FILE or --preset NAME".into(),
                })
            }
        };
        if let Some(v) = self.vocab {
            run.model = run.model.with_vocab(v);
        }
        run.model.validate()?;
        Ok(run)
    }
}

#[derive(Debug, Args)]
pub struct PretokenizeArgs {
    /// `domain=path` with one document per line; repeat per corpus.
    #[arg(long = "corpus", value_name = "DOMAIN=PATH")]
    pub corpora: Vec<String>,
    /// Generate the synthetic story/math corpora with this many tokens each.
    #[arg(long, conflicts_with = "corpora")]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub seq_len: usize,
    /// Fraction of chunks in the path-pretraining sub-collection.
    #[arg(long, default_value_t = 0.6)]
    pub split: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reuse an existing tokenizer instead of building one.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub max_words: Option<usize>,
    #[arg(long)]
    pub byte_fallback: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Chunk store files; merged in order.
    #[arg(long = "data", required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value = "baseline")]
    pub role: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Basename of the log and checkpoint files (defaults to the role).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from this model checkpoint (e.g. a composed model). Without
    /// `--config`/`--preset` its own model config and the desk train
    /// defaults are used.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop (with a resumable checkpoint) once this many steps are done.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    /// Path checkpoints in path order.
    #[arg(long = "path", required = true)]
    pub paths: Vec<PathBuf>,
    #[command(flatten)]
    pub target: ConfigSource,
    #[arg(long)]
    pub out: PathBuf,
    /// Provenance manifest (defaults to `<out>.provenance.json`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Lines of `domain<TAB>prompt`; defaults to the built-in desk prompts.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Also write one JSON record per prompt × layer cell.
    #[arg(long)]
    pub jsonl: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 8)]
    pub max_new_tokens: usize,
    /// 0 is greedy.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    #[arg(long)]
    pub json: bool,
    /// List preset names and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
    /// Print the raw manifest JSON.
    #[arg(long)]
    pub json: bool,
}

/// `--seed`, then `PAPA_SEED`, then the config value.
pub fn effective_seed(flag: Option<u64>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config {
            field: SEED_ENV.into(),
            reason: format!("not an unsigned integer: {v:?}"),
        }),
        Err(_) => Ok(config),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Pretokenize(a) => cmd_pretokenize(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Compose(a) => cmd_compose(&a, out),
        Command::Analyze(a) => cmd_analyze(&a, out),
        Command::Generate(a) => cmd_generate(&a, out),
        Command::CountParams(a) => cmd_count_params(&a, out),
        Command::InspectCheckpoint(a) => cmd_inspect(&a, out),
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', "; ");
            eprintln!("error[{}]: {msg}", e.exit_code());
            e.exit_code()
        }
    }
}

fn parse_corpus_arg(s: &str) -> Result<(Domain, PathBuf)> {
    let (d, p) = s
        .split_once('=')
        .ok_or_else(|| Error::Input(format!("--corpus expects DOMAIN=PATH, got {s:?}")))?;
    Ok((Domain::parse(d)?, PathBuf::from(p)))
}

pub fn cmd_pretokenize(a: &PretokenizeArgs, out: &mut dyn Write) -> Result<()> {
    let seed = effective_seed(a.seed, TrainConfig::default().seed)?;
    std::fs::create_dir_all(&a.out)?;
    let corpora: Vec<Corpus> = match a.synthetic {
        Some(n) => {
            let cs = desk_corpora(n, seed);
            for c in &cs {
                std::fs::write(a.out.join(format!("{}.txt", c.domain)), c.to_lines())?;
            }
            cs.into()
        }
        None => {
            if a.corpora.is_empty() {
                return Err(Error::Input("pass --corpus DOMAIN=PATH or --synthetic TOKENS".into()));
            }
            a.corpora
                .iter()
                .map(|s| {
                    let (d, p) = parse_corpus_arg(s)?;
                    Corpus::load(&p, d)
                })
                .collect::<Result<_>>()?
        }
    };
    let tok = match &a.tokenizer {
        Some(p) => ToyTokenizer::load(p)?,
        None if a.synthetic.is_some() && a.max_words.is_none() && !a.byte_fallback => desk_tokenizer(&corpora),
        None => ToyTokenizer::build(
            corpora.iter().flat_map(|c| c.documents.iter().map(String::as_str)),
            a.max_words,
            a.byte_fallback,
        ),
    };
    tok.save(&a.out.join("tokenizer.json"))?;
    writeln!(out, "vocab {} fingerprint {}", tok.vocab_size(), tok.fingerprint())?;
    writeln!(
        out,
        "{:<6} {:>5} {:>9} {:>6} {:>6} {:>9} {:>9} {:>5} {:>5}",
        "corpus", "epoch", "stream", "offset", "chunks", "chunk_tok", "remainder", "sub60", "sub40"
    )?;
    for c in &corpora {
        let (store, rows) = pretokenize(c, &tok, a.seq_len, a.split, seed)?;
        store.save(&a.out.join(format!("{}.chunks", c.domain)))?;
        for r in rows {
            writeln!(
                out,
                "{:<6} {:>5} {:>9} {:>6} {:>6} {:>9} {:>9} {:>5} {:>5}",
                r.corpus.as_str(),
                r.epoch,
                r.stream_tokens,
                r.offset,
                r.chunks,
                r.chunk_tokens,
                r.remainder,
                r.sub60,
                r.sub40
            )?;
        }
    }
    Ok(())
}

fn load_stores(paths: &[PathBuf]) -> Result<ChunkStore> {
    let stores: Vec<ChunkStore> = paths.iter().map(|p| ChunkStore::load(p)).collect::<Result<_>>()?;
    ChunkStore::merge(&stores)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let store = load_stores(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(Checkpoint::load(p)?)?,
        None => {
            let role = Role::parse(&a.role)?;
            let given = a.source.config.is_some() || a.source.preset.is_some();
            let init = a.init.as_deref().map(Checkpoint::load).transpose()?.map(|c| c.model);
            let run = match &init {
                Some(m) if !given => RunConfig {
                    model: m.config.clone(),
                    train: presets::desk_train(),
                },
                _ => a.source.resolve()?,
            };
            let mut train = run.train;
            train.seed = effective_seed(a.seed, train.seed)?;
            let model = match init {
                Some(m) => {
                    if m.config != run.model {
                        return Err(Error::config("model", "--init checkpoint does not match the given model config"));
                    }
                    m
                }
                None => {
                    let kind = run.model.connection.as_str();
                    let mut init = RngState::derived(train.seed, &format!("init:{}:{kind}", role.as_str()));
                    Model::build(&run.model, &mut init)?
                }
            };
            Trainer::new(model, train, role)?
        }
    };
    let name = a.name.clone().unwrap_or_else(|| trainer.state.role.as_str().to_string());
    let log_path = a.out.join(format!("{name}.log"));
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)?;
    let report = trainer.run(&store, a.stop_after, Some((&a.out, &name)), Some(&mut log))?;
    let ckpt = a.out.join(format!("{name}.ckpt"));
    trainer.checkpoint().save(&ckpt)?;
    writeln!(
        out,
        "{} {}: {} steps, ce {:.4} -> {:.4}",
        trainer.state.role.as_str(),
        name,
        report.steps.len(),
        report.initial_ce().unwrap_or(f64::NAN),
        report.final_ce().unwrap_or(f64::NAN)
    )?;
    writeln!(out, "log {}\ncheckpoint {}", log_path.display(), ckpt.display())?;
    Ok(())
}

pub fn cmd_compose(a: &ComposeArgs, out: &mut dyn Write) -> Result<()> {
    let target = a.target.resolve()?;
    let seed = effective_seed(a.seed, target.train.seed)?;
    let models: Vec<Model<f32>> = a
        .paths
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| c.model))
        .collect::<Result<_>>()?;
    let sources = models
        .iter()
        .enumerate()
        .map(|(i, m)| PathSource {
            name: format!("path{}", i + 1),
            config: m.config.clone(),
        })
        .collect();
    let plan = CompositionPlan::new(target.model.clone(), sources);
    let refs: Vec<&Model<f32>> = models.iter().collect();
    let mut rng = RngState::derived(seed, &format!("compose:{}", target.model.connection.as_str()));
    let model = compose(&plan, &refs, &mut rng)?;
    let manifest_path = a
        .manifest
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.provenance.json", a.out.display())));
    std::fs::write(&manifest_path, provenance_manifest(&model))?;
    let total = model.count_params().total;
    Checkpoint::of_model(model).save(&a.out)?;
    writeln!(
        out,
        "composed {} ({} params)\ncheckpoint {}\nmanifest {}",
        target.model.connection.as_str(),
        total,
        a.out.display(),
        manifest_path.display()
    )?;
    Ok(())
}

fn load_prompts(path: &Path) -> Result<Vec<(String, Domain)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (d, p) = l
                .split_once('\t')
                .ok_or_else(|| Error::Input(format!("prompt line needs domain<TAB>prompt: {l:?}")))?;
            Ok((p.to_string(), Domain::parse(d.trim())?))
        })
        .collect()
}

pub fn cmd_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let model = Checkpoint::load(&a.checkpoint)?.model;
    let tok = ToyTokenizer::load(&a.tokenizer)?;
    let prompts = match &a.prompts {
        Some(p) => load_prompts(p)?,
        None => desk_prompts(),
    };
    let report = analyze(&model, &tok, &prompts)?;
    write!(out, "{}", report.to_text())?;
    if let Some(p) = &a.jsonl {
        std::fs::write(p, report.to_jsonl())?;
    }
    Ok(())
}

pub fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let model = Checkpoint::load(&a.checkpoint)?.model;
    let tok = ToyTokenizer::load(&a.tokenizer)?;
    let mode = if a.temperature > 0.0 {
        SampleMode::Temperature(a.temperature)
    } else {
        SampleMode::Greedy
    };
    let seed = effective_seed(a.seed, TrainConfig::default().seed)?;
    let mut rng = RngState::derived(seed, "generate");
    let g = generate(&model, &tok, &a.prompt, a.max_new_tokens, mode, a.top, &mut rng)?;
    if g.truncated {
        eprintln!("warning: prompt exceeded max_seq_len and was truncated from the left");
    }
    if a.json {
        writeln!(out, "{}", serde_json::to_string(&g)?)?;
    } else {
        write!(out, "{}", g.to_text())?;
    }
    Ok(())
}

pub fn cmd_count_params(a: &CountArgs, out: &mut dyn Write) -> Result<()> {
    if a.list {
        for n in presets::NAMES {
            writeln!(out, "{n}")?;
        }
        return Ok(());
    }
    let cfg: ModelConfig = a.source.resolve()?.model;
    let report = crate::model::param_report(&cfg);
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    } else {
        write!(out, "{}", report.to_text())?;
    }
    Ok(())
}

pub fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let bytes = std::fs::read(&a.checkpoint).map_err(|e| Error::Checkpoint(format!("{}: {e}", a.checkpoint.display())))?;
    let (m, _) = Checkpoint::read_manifest(&bytes)?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&m)?)?;
        return Ok(());
    }
    let c = &m.model;
    writeln!(out, "format version {}", m.format_version)?;
    writeln!(
        out,
        "model: {} d_model {} d_path {} k {} parallel layers {} layer blocks {} vocab {} max_seq_len {}",
        c.connection.as_str(),
        c.d_model,
        c.d_path,
        c.k_paths,
        c.n_parallel_layers,
        c.n_layer_blocks,
        c.vocab_size,
        c.max_seq_len
    )?;
    if let Some(s) = &m.state {
        writeln!(out, "trainer: role {} epoch {} group {} step {}", s.role.as_str(), s.epoch, s.group, s.step)?;
    }
    if let Some(step) = m.optimizer_step {
        writeln!(out, "optimizer step {step}")?;
    }
    let mut total = 0usize;
    for t in &m.tensors {
        let n: usize = t.shape.iter().product();
        let tag = t.provenance.as_ref().map_or("optimizer", |p| p.tag());
        if t.provenance.is_some() {
            total += n;
        }
        writeln!(out, "{:<40} {:<14} {:>10} {:>12} {tag}", t.name, format!("{:?}", t.shape), n, t.offset)?;
    }
    writeln!(out, "parameters {total}")?;
    Ok(())
}
