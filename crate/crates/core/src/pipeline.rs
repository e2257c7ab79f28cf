//! End-to-end steps shared by the command line, the HTTP service and the
//! integration tests: corpus files, base pretraining, prompt training,
//! evaluation and parameter accounting.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    corpus_vocab, preprocess, read_jsonl_file, synth_generate, write_jsonl_file, DialogueSample, RawSample, Splits,
    SyntheticTaskSpec, TaskKind, Vocab, DOCUMENT_CONTEXT_CAP, LABEL_CONTEXT_CAP, LABEL_NAMES,
};
use crate::data::label_id;
use crate::decoding::{generate_for_sample, generate_from_prompt, DecodeConfig};
use crate::error::{Error, Result};
use crate::metrics::{label_controllability, persona_similarity, EvalReport, Sentence, TextMetrics};
use crate::prompt::{
    assemble_pretrain, param_ratio, prompt_tokens, reserved_slots, ControlAttribute, PromptConfig, PromptModule, Strategy,
    Template,
};
use crate::training::{
    assemble_split, fingerprint, train, validate, Checkpoint, CheckpointKind, CheckpointMeta, History, TrainConfig,
};
use crate::transformer::{LmParams, ModelConfig};

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

pub fn split_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.jsonl"))
}

pub fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, s) in SPLITS.iter().zip([&splits.train, &splits.valid, &splits.test]) {
        write_jsonl_file(&split_path(dir, name), s)?;
    }
    Ok(())
}

pub fn read_split(dir: &Path, name: &str) -> Result<Vec<RawSample>> {
    let p = split_path(dir, name);
    if !p.exists() {
        return Err(Error::data(format!("missing corpus split {}", p.display())));
    }
    read_jsonl_file(&p)
}

/// Generates and writes a synthetic corpus.
pub fn synth_data(dir: &Path, spec: &SyntheticTaskSpec, seed: u64) -> Result<Splits> {
    let splits = synth_generate(spec, seed)?;
    write_splits(dir, &splits)?;
    Ok(splits)
}

/// Rows of owned attribute tables for one task.
pub fn prompt_vocab(task: TaskKind, vocab_len: usize) -> usize {
    match task {
        TaskKind::Label => LABEL_NAMES.len(),
        TaskKind::Persona => vocab_len,
    }
}

/// Learning rate used when none is configured.
pub fn default_lr(strategy: Strategy, task: TaskKind) -> f64 {
    match (strategy, task) {
        (Strategy::FineTune, TaskKind::Label) => 1e-5,
        (Strategy::FineTune, TaskKind::Persona) => 5e-5,
        _ => 1e-4,
    }
}

/// Learning rate for pretraining the base model from scratch.
pub const BASE_LR: f64 = 1e-3;

fn pretrain_inputs(model: &ModelConfig, template: &Template, samples: &[DialogueSample]) -> Result<Vec<crate::prompt::AssembledInput>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        match assemble_pretrain(model, template, s) {
            Ok(a) => out.push(a),
            Err(Error::Length { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Result of one training command.
#[derive(Debug)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub history: History,
}

/// Pretrains a base model on the attribute-free layout of the training
/// split; the vocabulary is built from the same split.
pub fn train_base(
    train_raw: &[RawSample],
    valid_raw: &[RawSample],
    task: TaskKind,
    model: impl FnOnce(usize) -> ModelConfig,
    min_freq: usize,
    cfg: &TrainConfig,
) -> Result<Trained> {
    if train_raw.is_empty() {
        return Err(Error::data("training corpus is empty"));
    }
    let vocab = corpus_vocab(train_raw, min_freq)?;
    let model = model(vocab.len());
    model.validate()?;
    let template = Template::new(&vocab, task)?;
    let train_set = pretrain_inputs(&model, &template, &preprocess(task, train_raw, &vocab)?)?;
    let valid_set = pretrain_inputs(&model, &template, &preprocess(task, valid_raw, &vocab)?)?;
    let mut base = LmParams::<f32>::init(&model, cfg.seed)?;
    let mut module = PromptModule::init(PromptConfig::new(Strategy::FineTune, &model, 1), &model, cfg.seed)?;
    let valid = if valid_set.is_empty() { &train_set[..train_set.len().min(64)] } else { &valid_set[..] };
    let out = train(&mut base, &mut module, &train_set, valid, cfg, None)?;
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            kind: CheckpointKind::Base,
            strategy: Strategy::Frozen,
            task,
            model,
            vocab,
            prompt: None,
            train: Some(cfg.clone()),
            history: Some(out.history.clone()),
            base_fingerprint: None,
            seed: cfg.seed,
            adam_step: 0,
        },
        base: Some(base),
        prompt: None,
        optimizer: Some(out.optimizer),
    };
    Ok(Trained {
        checkpoint,
        history: out.history,
    })
}

/// Base weights of a base checkpoint.
pub fn base_of(ck: &Checkpoint) -> Result<&LmParams<f32>> {
    if ck.meta.kind != CheckpointKind::Base {
        return Err(Error::Checkpoint("expected a base checkpoint".into()));
    }
    ck.base
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("base checkpoint holds no weights".into()))
}

pub fn preprocess_with(base_ck: &Checkpoint, raw: &[RawSample]) -> Result<Vec<DialogueSample>> {
    preprocess(base_ck.meta.task, raw, &base_ck.meta.vocab)
}

/// Trains one strategy against a base checkpoint. The base is left
/// untouched except for fine-tuning, whose checkpoint carries its own copy.
pub fn train_prompt(
    base_ck: &Checkpoint,
    strategy: Strategy,
    prompt_cfg: impl FnOnce(PromptConfig) -> PromptConfig,
    train_raw: &[RawSample],
    valid_raw: &[RawSample],
    cfg: &TrainConfig,
) -> Result<Trained> {
    let base0 = base_of(base_ck)?;
    let meta = &base_ck.meta;
    let pc = prompt_cfg(PromptConfig::new(strategy, &meta.model, prompt_vocab(meta.task, meta.vocab.len())));
    let template = Template::new(&meta.vocab, meta.task)?;
    let (train_set, skipped) = assemble_split(&pc, &meta.model, &template, &preprocess_with(base_ck, train_raw)?)?;
    if skipped > 0 {
        log::info!("{skipped} training samples exceed the context window and are skipped");
    }
    let (valid_set, _) = assemble_split(&pc, &meta.model, &template, &preprocess_with(base_ck, valid_raw)?)?;
    let valid = if valid_set.is_empty() { &train_set[..train_set.len().min(64)] } else { &valid_set[..] };
    let mut base = base0.clone();
    let mut module = PromptModule::init(pc.clone(), &meta.model, cfg.seed)?;
    let out = train(&mut base, &mut module, &train_set, valid, cfg, None)?;
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            kind: CheckpointKind::Prompt,
            strategy,
            task: meta.task,
            model: meta.model.clone(),
            vocab: meta.vocab.clone(),
            prompt: Some(pc),
            train: Some(cfg.clone()),
            history: Some(out.history.clone()),
            base_fingerprint: Some(fingerprint(base0.store())),
            seed: cfg.seed,
            adam_step: 0,
        },
        base: strategy.trains_base().then_some(base),
        prompt: Some(module),
        optimizer: strategy.has_trainable_params().then_some(out.optimizer),
    };
    Ok(Trained {
        checkpoint,
        history: out.history,
    })
}

/// A base model paired with one strategy, ready for evaluation or serving.
#[derive(Clone, Debug)]
pub struct Model {
    pub strategy: Strategy,
    pub task: TaskKind,
    pub vocab: Vocab,
    pub template: Template,
    pub base: LmParams<f32>,
    pub module: PromptModule<f32>,
    /// Ratio against the base parameter count.
    pub phi: f64,
}

impl Model {
    /// The frozen base on its own.
    pub fn frozen(base_ck: &Checkpoint) -> Result<Self> {
        let base = base_of(base_ck)?.clone();
        let meta = &base_ck.meta;
        let pc = PromptConfig::new(Strategy::Frozen, &meta.model, prompt_vocab(meta.task, meta.vocab.len()));
        let module = PromptModule::init(pc, &meta.model, 0)?;
        Self::assemble(meta, base, module)
    }

    /// Pairs a strategy checkpoint with the base it was trained against.
    pub fn load(base_ck: &Checkpoint, prompt_ck: &Checkpoint) -> Result<Self> {
        if prompt_ck.meta.kind == CheckpointKind::Base {
            return Self::frozen(prompt_ck);
        }
        let base = base_of(base_ck)?;
        let want = fingerprint(base.store());
        match &prompt_ck.meta.base_fingerprint {
            Some(f) if *f == want => {}
            _ => {
                return Err(Error::Checkpoint(format!(
                    "{} checkpoint was trained against a different base model",
                    prompt_ck.meta.strategy
                )))
            }
        }
        let module = prompt_ck
            .prompt
            .clone()
            .ok_or_else(|| Error::Checkpoint("prompt checkpoint holds no module".into()))?;
        let base = match (&prompt_ck.base, prompt_ck.meta.strategy.trains_base()) {
            (Some(b), true) => b.clone(),
            (None, true) => return Err(Error::Checkpoint("fine-tune checkpoint lacks its base weights".into())),
            _ => base.clone(),
        };
        Self::assemble(&prompt_ck.meta, base, module)
    }

    fn assemble(meta: &CheckpointMeta, mut base: LmParams<f32>, module: PromptModule<f32>) -> Result<Self> {
        base.freeze();
        let template = Template::new(&meta.vocab, meta.task)?;
        let phi = param_ratio(&module, &base);
        Ok(Model {
            strategy: module.strategy(),
            task: meta.task,
            vocab: meta.vocab.clone(),
            template,
            base,
            module,
            phi,
        })
    }

    pub fn phi_pct(&self) -> f64 {
        self.phi * 100.0
    }
}

/// Generates a response for every sample of a split and scores it. Sample
/// `i` is decoded with seed `decode.seed + i`.
pub fn evaluate(model: &Model, samples: &[DialogueSample], decode: &DecodeConfig) -> Result<EvalReport> {
    decode.validate()?;
    if samples.is_empty() {
        return Err(Error::data("evaluation corpus is empty"));
    }
    let outputs: Vec<Option<Vec<usize>>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = DecodeConfig {
                seed: decode.seed.wrapping_add(i as u64),
                ..decode.clone()
            };
            match generate_for_sample(&model.base, &model.module, &model.template, s, &cfg) {
                Ok(ids) => Ok(Some(ids)),
                Err(Error::Length { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let kept: Vec<(&DialogueSample, Vec<usize>)> =
        samples.iter().zip(outputs).filter_map(|(s, o)| o.map(|ids| (s, ids))).collect();
    let skipped = samples.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::data("no evaluation sample fits the context window"));
    }
    let hyps: Vec<Sentence> = kept.iter().map(|(_, ids)| model.vocab.decode_tokens(ids)).collect();
    let refs: Vec<Vec<Sentence>> = kept
        .iter()
        .map(|(s, _)| s.references.iter().map(|r| model.vocab.decode_tokens(r)).collect())
        .collect();
    let text = TextMetrics::compute(&hyps, &refs)?;
    let (controllability, persona) = match model.task {
        TaskKind::Label => {
            let gold: Vec<usize> = kept
                .iter()
                .map(|(s, _)| match s.attribute {
                    ControlAttribute::Label(l) => Ok(l),
                    _ => Err(Error::data("label task sample without a label")),
                })
                .collect::<Result<_>>()?;
            (Some(label_controllability(&hyps, &gold)?), None)
        }
        TaskKind::Persona => {
            let gen: Vec<Vec<usize>> = kept.iter().map(|(_, ids)| ids.clone()).collect();
            let used: Vec<Vec<Vec<usize>>> = kept
                .iter()
                .map(|(s, _)| match &s.attribute {
                    ControlAttribute::Sentences(ps) => ps
                        .iter()
                        .zip(&s.used_persona)
                        .filter(|(_, &u)| u)
                        .map(|(p, _)| p.clone())
                        .collect(),
                    _ => Vec::new(),
                })
                .collect();
            let (sim, no_used) = persona_similarity(&gen, &used, model.base.embedding_table())?;
            if no_used > 0 {
                log::info!("{no_used} samples have no used persona sentence and are skipped for similarity");
            }
            (None, sim)
        }
    };
    let (assembled, _) = assemble_split(model.module.config(), model.base.config(), &model.template, samples)?;
    let val_loss = if assembled.is_empty() { None } else { Some(validate(&model.base, &model.module, &assembled)?) };
    let report = EvalReport {
        strategy: model.strategy.id().to_string(),
        task: model.task.to_string(),
        phi_pct: model.phi_pct(),
        controllability,
        text,
        persona_similarity: persona,
        val_loss,
        n_samples: kept.len(),
        skipped,
        decode: decode.clone(),
    };
    report.validate()?;
    Ok(report)
}

/// One row of the parameter report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub strategy: Strategy,
    pub params: usize,
    pub base_params: usize,
    pub phi_pct: f64,
}

/// Tunable-parameter accounting of every strategy on one backbone.
pub fn param_report(model: &ModelConfig, task: TaskKind) -> Result<Vec<ParamRow>> {
    let base = LmParams::<f32>::init(model, 0)?;
    Strategy::ALL
        .iter()
        .map(|&s| {
            let pc = PromptConfig::new(s, model, prompt_vocab(task, model.vocab_size));
            let m = PromptModule::<f32>::init(pc, model, 0)?;
            let params = match s {
                Strategy::FineTune => base.param_count(),
                _ => m.param_count(),
            };
            Ok(ParamRow {
                strategy: s,
                params,
                base_params: base.param_count(),
                phi_pct: param_ratio(&m, &base) * 100.0,
            })
        })
        .collect()
}

/// Fixed-width text table of a parameter report.
pub fn format_param_table(rows: &[ParamRow]) -> String {
    let mut out = format!("{:<10} {:>12} {:>10}\n", "strategy", "params", "phi%");
    for r in rows {
        out.push_str(&format!("{:<10} {:>12} {:>9.3}%\n", r.strategy.id(), r.params, r.phi_pct));
    }
    out
}

/// Control attribute as supplied interactively: a label name or persona
/// sentences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum AttributeSpec {
    Label(String),
    Persona(Vec<String>),
}

/// Builds a sample from raw text for live generation. The context must fit
/// the task's turn cap and the attribute kind must match the task.
pub fn request_sample(
    model: &Model,
    context: &[String],
    attribute: &AttributeSpec,
    knowledge: Option<&str>,
) -> Result<DialogueSample> {
    let cap = match model.task {
        TaskKind::Label => LABEL_CONTEXT_CAP,
        TaskKind::Persona => DOCUMENT_CONTEXT_CAP,
    };
    if context.is_empty() {
        return Err(Error::data("context is empty"));
    }
    if context.len() > cap {
        return Err(Error::data(format!(
            "context has {} turns; the {} task keeps at most {cap}",
            context.len(),
            model.task
        )));
    }
    let attribute = match (model.task, attribute) {
        (TaskKind::Label, AttributeSpec::Label(name)) => ControlAttribute::Label(
            label_id(name).ok_or_else(|| Error::data(format!("unknown label `{name}` (one of {})", LABEL_NAMES.join(", "))))?,
        ),
        (TaskKind::Persona, AttributeSpec::Persona(sents)) => {
            ControlAttribute::Sentences(sents.iter().map(|s| model.vocab.encode(s)).collect())
        }
        (task, _) => return Err(Error::data(format!("attribute kind does not match the {task} task"))),
    };
    attribute.validate(LABEL_NAMES.len())?;
    let knowledge = match model.task {
        TaskKind::Persona => Some(knowledge.map(|k| model.vocab.encode(k)).unwrap_or_default()),
        TaskKind::Label => None,
    };
    let n_sent = match &attribute {
        ControlAttribute::Sentences(s) => s.len(),
        _ => 0,
    };
    Ok(DialogueSample {
        id: "request".into(),
        context: context.iter().map(|u| model.vocab.encode(u)).collect(),
        attribute,
        knowledge,
        response: Vec::new(),
        references: Vec::new(),
        used_persona: vec![false; n_sent],
    })
}

/// One generated response.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub ids: Vec<usize>,
    pub text: String,
    /// Prompt positions prepended or prefixed by the strategy.
    pub prefix_len: usize,
}

pub fn respond(model: &Model, sample: &DialogueSample, decode: &DecodeConfig) -> Result<Generation> {
    decode.validate()?;
    let (ctx, attr) = prompt_tokens(model.module.config(), &model.template, sample)?;
    let prefix_len = reserved_slots(model.module.config(), attr.as_ref());
    let ids = generate_from_prompt(&model.base, &model.module, &ctx, attr.as_ref(), decode)?;
    Ok(Generation {
        text: model.vocab.decode(&ids),
        ids,
        prefix_len,
    })
}
