//! Tokenization, corpus files, preprocessing and the synthetic benchmark.

mod corpus;
mod preprocess;
mod synth;
mod vocab;

pub use corpus::{
    parse_sample_line, read_jsonl, read_jsonl_file, write_jsonl, write_jsonl_file, RawAttribute, RawSample,
};
pub use preprocess::{
    preprocess_document_corpus, preprocess_label_corpus, split_by_fraction, word_count, DialogueSample,
    DOCUMENT_CONTEXT_CAP, LABEL_CONTEXT_CAP, MAX_SENTENCE_WORDS,
};
pub use synth::{
    fixed_words, label_id, oracle_label, oracle_label_text, synth_generate, Splits, SyntheticTaskSpec, TaskKind,
    ACT_ENDINGS, ACT_MARKERS, LABEL_NAMES, PERSONA_SLOTS,
};
pub use vocab::{detokenize, is_word, tokenize, Vocab, BOS, EOS, PAD, RESERVED, SEP, UNK};

use crate::error::Result;

/// Marker words of the input templates.
pub const TEMPLATE_WORDS: [&str; 5] = ["Conversation", ":", "Act", "Knowledge", "Persona"];

/// Every token string a raw sample contributes.
pub fn sample_tokens(s: &RawSample) -> Vec<String> {
    let mut out = Vec::new();
    for u in &s.context {
        out.extend(tokenize(u));
    }
    out.extend(tokenize(&s.response));
    if let Some(k) = &s.knowledge {
        out.extend(tokenize(k));
    }
    if let RawAttribute::Persona(p) = &s.attribute {
        for x in p {
            out.extend(tokenize(x));
        }
    }
    for r in s.references.iter().flatten() {
        out.extend(tokenize(r));
    }
    out
}

/// Vocabulary over a corpus plus the template markers and label names,
/// which are always kept.
pub fn corpus_vocab(samples: &[RawSample], min_freq: usize) -> Result<Vocab> {
    let always: Vec<String> = TEMPLATE_WORDS
        .iter()
        .chain(LABEL_NAMES.iter())
        .map(|s| s.to_string())
        .collect();
    let forced = std::iter::repeat_n(always, min_freq.max(1));
    Vocab::build(samples.iter().map(sample_tokens).chain(forced), min_freq)
}

/// Preprocesses a split according to its task.
pub fn preprocess(task: TaskKind, raw: &[RawSample], vocab: &Vocab) -> Result<Vec<DialogueSample>> {
    match task {
        TaskKind::Label => preprocess_label_corpus(raw, vocab, LABEL_NAMES.len()),
        TaskKind::Persona => preprocess_document_corpus(raw, vocab),
    }
}

/// Base-vocabulary ids of the label names, indexed by label.
pub fn label_tokens(vocab: &Vocab) -> Vec<usize> {
    LABEL_NAMES.iter().map(|n| vocab.id_or_unk(n)).collect()
}
