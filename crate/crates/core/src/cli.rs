//! Command-line front end. Each subcommand merges its flags over the
//! optional `--config` file, validates every input path, then runs one
//! pipeline step.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{DataArgs, DecodeArgs, ModelArgs, PathArgs, PromptArgs, RunConfig, TrainArgs};
use crate::data::{read_jsonl_file, TaskKind};
use crate::error::{Error, Result};
use crate::pipeline::{
    self, default_lr, evaluate, format_param_table, param_report, preprocess_with, read_split, request_sample, respond,
    AttributeSpec, Model, Trained, BASE_LR,
};
use crate::prompt::Strategy;
use crate::training::Checkpoint;

#[derive(Parser, Debug)]
#[command(name = "cdprompt", version, about = "Controlled prompt-tuning for dialogue generation")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic controlled-dialogue corpus as JSONL splits.
    SynthData(SynthDataCmd),
    /// Pretrain the base language model.
    TrainBase(TrainBaseCmd),
    /// Train one adaptation strategy against a frozen base.
    TrainPrompt(TrainPromptCmd),
    /// Decode a split and write a metrics report.
    Evaluate(EvaluateCmd),
    /// Print sampled responses.
    Generate(GenerateCmd),
    /// Tunable-parameter ratio of every strategy.
    ParamReport(ParamReportCmd),
    /// Run the HTTP service.
    Serve(ServeCmd),
}

#[derive(Args, Debug)]
pub struct SynthDataCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub paths: PathArgs,
    /// Corpus seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainBaseCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub paths: PathArgs,
}

#[derive(Args, Debug)]
pub struct TrainPromptCmd {
    #[arg(long)]
    pub strategy: String,
    /// Output checkpoint; defaults to `<checkpoint-dir>/<strategy>.ckpt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub paths: PathArgs,
}

#[derive(Args, Debug)]
pub struct ModelSel {
    /// Strategy whose checkpoint is read from the checkpoint directory.
    #[arg(long, default_value = "frozen")]
    pub strategy: String,
    /// Explicit strategy checkpoint, overriding the directory lookup.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateCmd {
    #[command(flatten)]
    pub sel: ModelSel,
    /// Split to decode.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Evaluate only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Sampling seed; sample i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub paths: PathArgs,
}

#[derive(Args, Debug)]
pub struct GenerateCmd {
    #[command(flatten)]
    pub sel: ModelSel,
    /// Context utterance, oldest first (repeatable). Without any, samples
    /// are read from the test split.
    #[arg(long)]
    pub context: Vec<String>,
    /// Label name for the label task.
    #[arg(long)]
    pub label: Option<String>,
    /// Persona sentence (repeatable).
    #[arg(long)]
    pub persona: Vec<String>,
    #[arg(long)]
    pub knowledge: Option<String>,
    /// Number of split samples to decode when no context is given.
    #[arg(long, default_value_t = 5)]
    pub limit: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub paths: PathArgs,
}

#[derive(Args, Debug)]
pub struct ParamReportCmd {
    /// Read the backbone shape and vocabulary from this base checkpoint.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// Vocabulary size when no base checkpoint is given.
    #[arg(long, default_value_t = 2000)]
    pub vocab_size: usize,
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct ServeCmd {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

const DEFAULT_DATA_DIR: &str = "data";
const DEFAULT_CHECKPOINT_DIR: &str = "checkpoints";

fn data_dir(p: &PathArgs) -> PathBuf {
    p.data_dir.clone().unwrap_or_else(|| DEFAULT_DATA_DIR.into())
}

fn checkpoint_dir(p: &PathArgs) -> PathBuf {
    p.checkpoint_dir.clone().unwrap_or_else(|| DEFAULT_CHECKPOINT_DIR.into())
}

fn base_path(p: &PathArgs) -> PathBuf {
    p.base.clone().unwrap_or_else(|| checkpoint_dir(p).join("base.ckpt"))
}

pub fn strategy_path(dir: &Path, strategy: Strategy) -> PathBuf {
    dir.join(format!("{}.ckpt", strategy.id()))
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(Error::data(format!("{what} {} not found", p.display())));
    }
    Ok(())
}

fn require_splits(dir: &Path, names: &[&str]) -> Result<()> {
    for n in names {
        require_file(&pipeline::split_path(dir, n), "corpus split")?;
    }
    Ok(())
}

fn load_checkpoint(p: &Path, what: &str) -> Result<Checkpoint> {
    require_file(p, what)?;
    Checkpoint::load(p)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, text)?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

/// Saves the trained checkpoint, reporting a numeric abort after the last
/// good weights are on disk.
fn finish_training(t: Trained, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    t.checkpoint.save(out)?;
    let h = &t.history;
    log::info!("saved {} ({} steps)", out.display(), h.steps);
    match &h.aborted {
        Some(why) => Err(Error::Numeric(format!("training aborted: {why}; last good weights saved"))),
        None => Ok(()),
    }
}

fn select_model(sel: &ModelSel, paths: &PathArgs) -> Result<(Checkpoint, Model)> {
    let strategy: Strategy = sel.strategy.parse()?;
    let base = load_checkpoint(&base_path(paths), "base checkpoint")?;
    let model = match (&sel.checkpoint, strategy) {
        (Some(p), _) => Model::load(&base, &load_checkpoint(p, "strategy checkpoint")?)?,
        (None, Strategy::Frozen) => Model::frozen(&base)?,
        (None, s) => Model::load(&base, &load_checkpoint(&strategy_path(&checkpoint_dir(paths), s), "strategy checkpoint")?)?,
    };
    Ok((base, model))
}

fn attribute_spec(cmd: &GenerateCmd, task: TaskKind) -> Result<AttributeSpec> {
    match (task, &cmd.label, cmd.persona.is_empty()) {
        (TaskKind::Label, Some(l), true) => Ok(AttributeSpec::Label(l.clone())),
        (TaskKind::Persona, None, false) => Ok(AttributeSpec::Persona(cmd.persona.clone())),
        (TaskKind::Label, _, _) => Err(Error::Config("the label task needs exactly --label".into())),
        (TaskKind::Persona, _, _) => Err(Error::Config("the persona task needs --persona sentences".into())),
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::SynthData(c) => {
            let data = c.data.merge(file.data);
            let paths = c.paths.merge(file.paths);
            let seed = c.seed.or(data.data_seed).unwrap_or(42);
            let dir = data_dir(&paths);
            let splits = pipeline::synth_data(&dir, &data.spec(), seed)?;
            log::info!(
                "wrote {} / {} / {} samples to {}",
                splits.train.len(),
                splits.valid.len(),
                splits.test.len(),
                dir.display()
            );
            Ok(())
        }
        Command::TrainBase(c) => {
            let data = c.data.merge(file.data);
            let model = c.model.merge(file.model);
            let train = c.train.merge(file.train);
            let paths = c.paths.merge(file.paths);
            let dir = data_dir(&paths);
            require_splits(&dir, &["train", "valid"])?;
            let cfg = train.train_config(BASE_LR);
            cfg.validate()?;
            let train_raw = read_split(&dir, "train")?;
            let valid_raw = read_split(&dir, "valid")?;
            let task = data.task.unwrap_or_else(|| infer_task(&train_raw));
            let t = pipeline::train_base(&train_raw, &valid_raw, task, |v| model.model(v), data.min_freq.unwrap_or(1), &cfg)?;
            finish_training(t, &base_path(&paths))
        }
        Command::TrainPrompt(c) => {
            let strategy: Strategy = c.strategy.parse()?;
            let train = c.train.merge(file.train);
            let prompt = c.prompt.merge(file.prompt);
            let paths = c.paths.merge(file.paths);
            let dir = data_dir(&paths);
            require_splits(&dir, &["train", "valid"])?;
            let base = load_checkpoint(&base_path(&paths), "base checkpoint")?;
            let cfg = train.train_config(default_lr(strategy, base.meta.task));
            cfg.validate()?;
            let train_raw = read_split(&dir, "train")?;
            let valid_raw = read_split(&dir, "valid")?;
            let t = pipeline::train_prompt(&base, strategy, |pc| prompt.apply(pc), &train_raw, &valid_raw, &cfg)?;
            let out = c.out.clone().unwrap_or_else(|| strategy_path(&checkpoint_dir(&paths), strategy));
            finish_training(t, &out)
        }
        Command::Evaluate(c) => {
            let paths = c.paths.merge(file.paths);
            let decode = c.decode.merge(file.decode);
            let dir = data_dir(&paths);
            require_splits(&dir, &[&c.split])?;
            let (base, model) = select_model(&c.sel, &paths)?;
            let mut cfg = decode.decode_config();
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            let mut raw = read_split(&dir, &c.split)?;
            if let Some(n) = c.limit {
                raw.truncate(n);
            }
            let samples = preprocess_with(&base, &raw)?;
            let report = evaluate(&model, &samples, &cfg)?;
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            write_out(c.report.as_deref(), &text)
        }
        Command::Generate(c) => {
            let paths = c.paths.clone().merge(file.paths);
            let decode = c.decode.clone().merge(file.decode);
            let mut cfg = decode.decode_config();
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            let (base, model) = select_model(&c.sel, &paths)?;
            let mut out = String::new();
            if c.context.is_empty() {
                let dir = data_dir(&paths);
                require_splits(&dir, &["test"])?;
                let mut raw = read_jsonl_file(&pipeline::split_path(&dir, "test"))?;
                raw.truncate(c.limit);
                for (i, s) in preprocess_with(&base, &raw)?.iter().enumerate() {
                    let g = respond(&model, s, &crate::decoding::DecodeConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() })?;
                    out.push_str(&format!("{}\t{}\n", s.id, g.text));
                }
            } else {
                let attr = attribute_spec(&c, model.task)?;
                let s = request_sample(&model, &c.context, &attr, c.knowledge.as_deref())?;
                out.push_str(&respond(&model, &s, &cfg)?.text);
                out.push('\n');
            }
            write_out(None, &out)
        }
        Command::ParamReport(c) => {
            let model_args = c.model.merge(file.model);
            let (mc, task) = match &c.base {
                Some(p) => {
                    let ck = load_checkpoint(p, "base checkpoint")?;
                    (ck.meta.model.clone(), ck.meta.task)
                }
                None => (
                    model_args.model(c.vocab_size),
                    c.task.or(file.data.task).unwrap_or(TaskKind::Label),
                ),
            };
            let rows = param_report(&mc, task)?;
            let text = if c.json { serde_json::to_string_pretty(&rows)? + "\n" } else { format_param_table(&rows) };
            write_out(None, &text)
        }
        Command::Serve(c) => {
            let dir = c
                .checkpoint_dir
                .clone()
                .or(file.paths.checkpoint_dir)
                .unwrap_or_else(|| DEFAULT_CHECKPOINT_DIR.into());
            if !dir.is_dir() {
                return Err(Error::data(format!("checkpoint directory {} not found", dir.display())));
            }
            let addr = format!("{}:{}", c.host, c.port);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::server::serve(&addr, dir))
        }
    }
}

fn infer_task(raw: &[crate::data::RawSample]) -> TaskKind {
    match raw.first().map(|s| &s.attribute) {
        Some(crate::data::RawAttribute::Persona(_)) => TaskKind::Persona,
        _ => TaskKind::Label,
    }
}
