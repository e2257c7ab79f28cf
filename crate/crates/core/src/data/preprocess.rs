use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{RawAttribute, RawSample};
use super::vocab::{is_word, tokenize, Vocab};
use crate::error::{Error, Result};
use crate::prompt::ControlAttribute;

pub const LABEL_CONTEXT_CAP: usize = 4;
pub const DOCUMENT_CONTEXT_CAP: usize = 3;
pub const MAX_SENTENCE_WORDS: usize = 25;

/// A tokenized, preprocessed sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub id: String,
    pub context: Vec<Vec<usize>>,
    pub attribute: ControlAttribute,
    pub knowledge: Option<Vec<usize>>,
    pub response: Vec<usize>,
    /// Evaluation references; the response alone when none were given.
    pub references: Vec<Vec<usize>>,
    pub used_persona: Vec<bool>,
}

pub fn word_count(text: &str) -> usize {
    tokenize(text).iter().filter(|t| is_word(t)).count()
}

fn last_n(context: &[String], n: usize) -> &[String] {
    &context[context.len().saturating_sub(n)..]
}

fn references(raw: &RawSample, vocab: &Vocab, response: &[usize]) -> Vec<Vec<usize>> {
    match &raw.references {
        Some(r) if !r.is_empty() => r.iter().map(|s| vocab.encode(s)).collect(),
        _ => vec![response.to_vec()],
    }
}

fn encode_response(raw: &RawSample, vocab: &Vocab) -> Result<Vec<usize>> {
    let r = vocab.encode(&raw.response);
    if r.is_empty() {
        return Err(Error::Data(format!("sample {}: empty response", raw.id)));
    }
    Ok(r)
}

/// Keeps the most recent four context turns and drops any sample whose
/// remaining sentences (context or response) exceed 25 words.
pub fn preprocess_label_corpus(raw: &[RawSample], vocab: &Vocab, n_labels: usize) -> Result<Vec<DialogueSample>> {
    let mut out = Vec::with_capacity(raw.len());
    for s in raw {
        let label = match &s.attribute {
            RawAttribute::Label(l) if *l < n_labels => *l,
            RawAttribute::Label(l) => {
                return Err(Error::Index {
                    what: "label",
                    index: *l,
                    size: n_labels,
                })
            }
            RawAttribute::Persona(_) => {
                return Err(Error::Data(format!("sample {}: persona attribute in a label corpus", s.id)))
            }
        };
        let context = last_n(&s.context, LABEL_CONTEXT_CAP);
        let too_long = context
            .iter()
            .chain(std::iter::once(&s.response))
            .any(|u| word_count(u) > MAX_SENTENCE_WORDS);
        if too_long {
            continue;
        }
        let response = encode_response(s, vocab)?;
        out.push(DialogueSample {
            id: s.id.clone(),
            context: context.iter().map(|u| vocab.encode(u)).collect(),
            attribute: ControlAttribute::Label(label),
            knowledge: None,
            references: references(s, vocab, &response),
            response,
            used_persona: Vec::new(),
        });
    }
    Ok(out)
}

/// Keeps the most recent three context turns, attaches the knowledge
/// sentence and carries persona sentences as the attribute.
pub fn preprocess_document_corpus(raw: &[RawSample], vocab: &Vocab) -> Result<Vec<DialogueSample>> {
    let mut out = Vec::with_capacity(raw.len());
    for s in raw {
        let persona = match &s.attribute {
            RawAttribute::Persona(p) => p,
            RawAttribute::Label(_) => {
                return Err(Error::Data(format!("sample {}: label attribute in a document corpus", s.id)))
            }
        };
        if persona.is_empty() {
            return Err(Error::Data(format!("sample {}: empty persona list", s.id)));
        }
        let knowledge = s
            .knowledge
            .as_deref()
            .ok_or_else(|| Error::Data(format!("sample {}: missing knowledge", s.id)))?;
        let sentences: Vec<Vec<usize>> = persona.iter().map(|p| vocab.encode(p)).collect();
        if sentences.iter().any(Vec::is_empty) {
            return Err(Error::Data(format!("sample {}: empty persona sentence", s.id)));
        }
        let used = match &s.used_persona {
            Some(u) if u.len() != persona.len() => {
                return Err(Error::Data(format!(
                    "sample {}: {} used-persona flags for {} sentences",
                    s.id,
                    u.len(),
                    persona.len()
                )))
            }
            Some(u) => u.clone(),
            None => vec![false; persona.len()],
        };
        let response = encode_response(s, vocab)?;
        out.push(DialogueSample {
            id: s.id.clone(),
            context: last_n(&s.context, DOCUMENT_CONTEXT_CAP)
                .iter()
                .map(|u| vocab.encode(u))
                .collect(),
            attribute: ControlAttribute::Sentences(sentences),
            knowledge: Some(vocab.encode(knowledge)),
            references: references(s, vocab, &response),
            response,
            used_persona: used,
        });
    }
    Ok(out)
}

/// Deterministic shuffled split; the first part holds `round(frac·n)`.
pub fn split_by_fraction<T: Clone>(items: &[T], frac: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((items.len() as f64) * frac).round() as usize;
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    (pick(&idx[..cut]), pick(&idx[cut..]))
}
